"""Supervised fine-tuning for referable-vs-non-referable classification."""
from __future__ import annotations

import copy
import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentationPolicy, apply_regular
from .checkpoint import Checkpoint
from .data import DatasetManifest, kfold_split
from .imaging import ImageLoadError, load_image, resize
from .models import Classifier, EncoderConfig, ShapeMismatchError, init_weights, load_named_tensors, named_tensors, to_tensor
from .pretrain import TrainingDivergedError, make_optimizer
from .rng import substream
from .stats import auc

log = logging.getLogger(__name__)

INITS = ("contrastive_checkpoint", "random_baseline")
DEFAULT_LR_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


@dataclass(frozen=True)
class TrainParams:
    """One hyperparameter grid point."""

    learning_rate: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 32

    def sort_key(self):
        # Tie-break order: lower lr, then adam before sgd, then smaller batch.
        return (self.learning_rate, self.optimizer != "adam", self.batch_size)


@dataclass(frozen=True)
class FinetuneConfig:
    init: str = "contrastive_checkpoint"
    lr_grid: tuple[float, ...] = DEFAULT_LR_GRID
    optimizer_grid: tuple[str, ...] = ("adam", "sgd")
    batch_grid: tuple[int, ...] = (32, 64, 128, 256)
    epochs: int = 30
    folds: int = 5
    label_fraction: float = 1.0
    freeze_encoder: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        for name in ("lr_grid", "optimizer_grid", "batch_grid"):
            values = tuple(getattr(self, name))
            if not values:
                raise ValueError(f"{name} must be non-empty")
            object.__setattr__(self, name, values)
        if any(o not in ("adam", "sgd") for o in self.optimizer_grid):
            raise ValueError("optimizers must be adam or sgd")
        if any(lr < 0 for lr in self.lr_grid) or any(b < 1 for b in self.batch_grid):
            raise ValueError("learning rates must be >= 0 and batch sizes >= 1")
        if self.folds < 2 or self.epochs < 1:
            raise ValueError("folds must be >= 2 and epochs >= 1")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in (0, 1]")

    def grid(self) -> list[TrainParams]:
        return [TrainParams(lr, opt, bs) for lr, opt, bs in
                itertools.product(self.lr_grid, self.optimizer_grid, self.batch_grid)]


@dataclass
class LabeledImages:
    """Decoded images at model resolution with their referable labels."""

    ids: list[str]
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, size: int) -> "LabeledImages":
        imgs = [resize(load_image(r.image_uri), size, size).astype(np.float32) for r in manifest.records]
        return cls(manifest.ids, np.stack(imgs), manifest.labels)

    def subset(self, ids: Sequence[str]) -> "LabeledImages":
        pos = {k: i for i, k in enumerate(self.ids)}
        idx = np.array([pos[k] for k in ids], dtype=np.intp)
        return LabeledImages(list(ids), self.images[idx], self.labels[idx])


@dataclass
class FinetuneResult:
    model: Classifier
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("nan")


def build_classifier(init: str, encoder_cfg: EncoderConfig, checkpoint: Checkpoint | None = None,
                     seed: int = 0) -> Classifier:
    """Classifier with a contrastive-checkpoint or seeded random encoder and a fresh head."""
    if init not in INITS:
        raise ValueError(f"init must be one of {INITS}")
    if (checkpoint is not None) != (init == "contrastive_checkpoint"):
        raise ValueError("a checkpoint is required for (and only for) contrastive_checkpoint init")
    model = Classifier(encoder_cfg)
    init_weights(model.encoder, seed, "finetune", "baseline-encoder")
    init_weights(model.head, seed, "finetune", "head")
    if checkpoint is not None:
        tensors = checkpoint.prefixed("encoder")
        if not tensors:
            raise ShapeMismatchError("checkpoint holds no encoder.* tensors")
        load_named_tensors(model.encoder, tensors)
    return model


def classifier_checkpoint(model: Classifier, metadata: dict) -> Checkpoint:
    meta = {"kind": "classifier", "encoder": model.encoder.cfg.to_dict(), **metadata}
    return Checkpoint(named_tensors(model), meta)


def classifier_from_checkpoint(ckpt: Checkpoint) -> Classifier:
    if ckpt.metadata.get("kind") != "classifier":
        raise ValueError("checkpoint does not hold a fine-tuned classifier")
    model = Classifier(EncoderConfig.from_dict(ckpt.metadata["encoder"]))
    load_named_tensors(model, ckpt.tensors)
    model.eval()
    return model


@torch.no_grad()
def predict_proba(model: Classifier, images, batch_size: int = 256) -> np.ndarray:
    """Referable probability per image, in input order, without test-time augmentation."""
    model.eval()
    images = np.asarray(images)
    if len(images) == 0:
        return np.zeros(0)
    out = [model.proba(to_tensor(images[i:i + batch_size]))[:, 1].double().numpy()
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def predict_manifest(model: Classifier, manifest: DatasetManifest) -> tuple[np.ndarray, dict[str, str]]:
    """Probabilities for every record; unreadable images yield NaN and an error entry."""
    size = model.encoder.cfg.input_size
    probs = np.full(len(manifest), np.nan)
    errors: dict[str, str] = {}
    good, imgs = [], []
    for i, r in enumerate(manifest.records):
        try:
            imgs.append(resize(load_image(r.image_uri), size, size).astype(np.float32))
            good.append(i)
        except (ImageLoadError, OSError) as exc:
            errors[r.image_id] = str(exc)
    if good:
        probs[good] = predict_proba(model, np.stack(imgs))
    return probs, errors


def finetune(
    model: Classifier,
    train: LabeledImages,
    val: LabeledImages,
    params: TrainParams,
    epochs: int = 30,
    policy: AugmentationPolicy | None = None,
    seed: int = 0,
    freeze_encoder: bool = False,
    stream: tuple = (),
) -> FinetuneResult:
    """Minimise mean cross-entropy on augmented training images.

    Validation AUC is measured after every epoch and the weights of the best
    epoch (earliest on ties) are restored before returning.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if len(np.unique(train.labels)) < 2:
        raise ValueError("training split holds a single class")
    size = model.encoder.cfg.input_size
    policy = replace(policy or AugmentationPolicy(output_size=size), p_nst=0.0)
    if policy.output_size != size:
        raise ValueError("augmentation output_size must equal encoder input_size")

    model.requires_grad_(True)
    if freeze_encoder:
        model.encoder.requires_grad_(False)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = make_optimizer(trainable, params.optimizer, params.learning_rate)
    labels = torch.from_numpy(train.labels.astype(np.int64))

    best_auc, best_epoch = -np.inf, 0
    best_state = copy.deepcopy(model.state_dict())
    history = []
    n, bs = len(train), params.batch_size
    for epoch in range(1, epochs + 1):
        base = ("finetune", *stream, "epoch", epoch)
        perm = substream(seed, *base, "shuffle").permutation(n)
        model.train()
        losses = []
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            views = np.stack([apply_regular(train.images[i], policy, substream(seed, *base, "img", int(i)))
                              for i in idx]).astype(np.float32)
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(model(to_tensor(views)), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite cross-entropy at epoch {epoch}")
            loss.backward()
            optimizer.step()
            losses.append(loss.item() * len(idx))
        val_auc = auc(predict_proba(model, val.images), val.labels)
        history.append({"epoch": epoch, "train_loss": sum(losses) / n, "val_auc": val_auc})
        if val_auc > best_auc:
            best_auc, best_epoch = val_auc, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.requires_grad_(True)
    model.eval()
    return FinetuneResult(model, history, best_epoch, float(best_auc))


@dataclass
class SearchResult:
    best: TrainParams
    table: list[dict]
    summary: list[dict]


def hyperparameter_search(
    train: LabeledImages,
    manifest: DatasetManifest,
    cfg: FinetuneConfig,
    encoder_cfg: EncoderConfig,
    checkpoint: Checkpoint | None = None,
    policy: AugmentationPolicy | None = None,
    grid: Sequence[TrainParams] | None = None,
) -> SearchResult:
    """Mean k-fold validation AUC per grid point; returns the argmax.

    ``table`` holds one row per (grid point, fold) and ``summary`` one row per
    grid point.  A grid point whose training fails on any fold is marked
    ``failed`` and excluded from the argmax.
    """
    grid = list(grid) if grid is not None else cfg.grid()
    folds = kfold_split(manifest, cfg.folds, cfg.seed)
    table, summary = [], []
    for point in sorted(grid, key=TrainParams.sort_key):
        scores, failed = [], False
        for f, (tr, va) in enumerate(folds):
            row = {"lr": point.learning_rate, "optimizer": point.optimizer, "batch": point.batch_size,
                   "fold": f, "val_auc": float("nan"), "status": "ok"}
            try:
                model = build_classifier(cfg.init, encoder_cfg, checkpoint, cfg.seed)
                res = finetune(model, train.subset(tr.ids), train.subset(va.ids), point, cfg.epochs, policy,
                               cfg.seed, cfg.freeze_encoder, stream=("cv", f))
                row["val_auc"] = res.best_val_auc
            except (TrainingDivergedError, ValueError, FloatingPointError) as exc:
                log.warning("grid point %s fold %d failed: %s", point, f, exc)
                row["status"] = "failed"
                failed = True
            scores.append(row["val_auc"])
            table.append(row)
        summary.append({"lr": point.learning_rate, "optimizer": point.optimizer, "batch": point.batch_size,
                        "mean_val_auc": float("nan") if failed else float(np.mean(scores)),
                        "status": "failed" if failed else "ok"})
    ok = [s for s in summary if s["status"] == "ok"]
    if not ok:
        raise RuntimeError("every hyperparameter grid point failed")
    top = max(s["mean_val_auc"] for s in ok)
    # summary is already in tie-break order, so the first maximiser wins.
    winner = next(s for s in ok if s["mean_val_auc"] == top)
    best = TrainParams(winner["lr"], winner["optimizer"], winner["batch"])
    return SearchResult(best, table, summary)
