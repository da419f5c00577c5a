"""Contrastive pretraining loop with saturation stopping."""
from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .augment import AugmentationPolicy, StyleBank, make_view_pair
from .checkpoint import Checkpoint
from .data import DatasetManifest
from .imaging import load_image, resize
from .losses import nt_xent_loss
from .models import (
    ContrastiveModel,
    EncoderConfig,
    ProjectionHeadConfig,
    config_digest,
    init_weights,
    named_tensors,
    to_tensor,
)
from .rng import substream

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 64
    temperature: float = 0.5
    max_epochs: int = 100
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    saturation_patience: int = 10
    saturation_delta: float = 1e-3
    probe_batches: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so each batch holds negatives")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.max_epochs < 1 or self.saturation_patience < 1 or self.probe_batches < 1:
            raise ValueError("max_epochs, saturation_patience and probe_batches must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def losses(self) -> list[float]:
        return [row["loss"] for row in self.history]


def make_optimizer(params, name: str, lr: float) -> torch.optim.Optimizer:
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr, momentum=0.9)


def load_images(manifest: DatasetManifest, size: int | None = None, jobs: int = 1) -> list[np.ndarray]:
    """Decode every record (float32), optionally resized square to ``size``."""

    def one(record):
        img = load_image(record.image_uri)
        if size is not None:
            img = resize(img, size, size)
        return img.astype(np.float32)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(one, manifest.records))
    return [one(r) for r in manifest.records]


def build_views(images, indices, policy, style_bank, seed, stream, codec=None, jobs: int = 1) -> np.ndarray:
    """Interleaved (2B, H, W, 3) views; rows 2k and 2k+1 come from ``images[indices[k]]``."""

    def pair(idx):
        rng = substream(seed, *stream, "img", int(idx))
        return make_view_pair(images[idx], policy, style_bank, rng, codec)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            pairs = list(pool.map(pair, indices))
    else:
        pairs = [pair(i) for i in indices]
    return np.stack([v for p in pairs for v in p]).astype(np.float32)


class SaturationTracker:
    """Stops once the best loss has not improved by a relative ``delta`` for ``patience`` epochs."""

    def __init__(self, patience: int, delta: float):
        self.patience, self.delta = patience, delta
        self.best = np.inf
        self.best_epoch = 0
        self._anchor = np.inf
        self.stale = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record an epoch; True when this epoch holds the lowest loss so far."""
        if not np.isfinite(self._anchor) or loss < self._anchor - self.delta * abs(self._anchor):
            self._anchor, self.stale = loss, 0
        else:
            self.stale += 1
        if loss < self.best:
            self.best, self.best_epoch = loss, epoch
            return True
        return False

    @property
    def saturated(self) -> bool:
        return self.stale >= self.patience


def contrastive_step(model, views: np.ndarray, tau: float, optimizer=None) -> float:
    """NT-Xent on one batch of interleaved views; updates weights when given an optimizer."""
    x = to_tensor(views)
    if optimizer is None:
        with torch.no_grad():
            z = model(x)
        return nt_xent_loss(z.double().numpy(), tau)[0]
    optimizer.zero_grad(set_to_none=True)
    z = model(x)
    loss, grad = nt_xent_loss(z.detach().double().numpy(), tau)
    if not np.isfinite(loss):
        return loss
    z.backward(torch.from_numpy(grad).to(z.dtype))
    optimizer.step()
    return loss


def pretrain(
    images: list[np.ndarray],
    policy: AugmentationPolicy,
    style_bank: StyleBank | None,
    encoder_cfg: EncoderConfig,
    head_cfg: ProjectionHeadConfig,
    cfg: PretrainConfig,
    codec=None,
    jobs: int = 1,
    on_epoch=None,
) -> PretrainResult:
    """Train encoder + projection head with NT-Xent on unlabeled images.

    The reported per-epoch ``loss`` is NT-Xent on a fixed probe set of view
    pairs, drawn once before training; it drives saturation stopping and
    best-epoch selection.  ``train_loss`` is the mean over the epoch's
    optimisation batches.
    """
    n, bs = len(images), cfg.batch_size
    if n < bs:
        raise InsufficientDataError(f"{n} images cannot fill one batch of {bs}")
    if policy.output_size != encoder_cfg.input_size:
        raise ValueError("augmentation output_size must equal encoder input_size")

    model = ContrastiveModel(encoder_cfg, head_cfg)
    init_weights(model, cfg.seed, "pretrain")
    optimizer = make_optimizer(model.parameters(), cfg.optimizer, cfg.learning_rate)

    probe_rng = substream(cfg.seed, "pretrain", "probe")
    n_probe = min(cfg.probe_batches, n // bs) * bs
    probe_idx = np.sort(probe_rng.choice(n, size=n_probe, replace=False))
    probe = build_views(images, probe_idx, policy, style_bank, cfg.seed, ("pretrain", "probe"), codec, jobs)

    def probe_loss() -> float:
        chunk = 2 * bs
        return float(np.mean([contrastive_step(model, probe[i:i + chunk], cfg.temperature)
                              for i in range(0, len(probe), chunk)]))

    tracker = SaturationTracker(cfg.saturation_patience, cfg.saturation_delta)
    history: list[dict] = []
    best_state = copy.deepcopy(model.state_dict())
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        perm = substream(cfg.seed, "pretrain", "epoch", epoch, "shuffle").permutation(n)
        batch_losses = []
        model.train()
        for b in range(n // bs):
            idx = perm[b * bs:(b + 1) * bs]
            views = build_views(images, idx, policy, style_bank, cfg.seed, ("pretrain", "epoch", epoch), codec, jobs)
            loss = contrastive_step(model, views, cfg.temperature, optimizer)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite NT-Xent loss at epoch {epoch}, batch {b}")
            batch_losses.append(loss)
        model.eval()
        epoch_loss = probe_loss()
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(f"non-finite probe loss after epoch {epoch}")
        row = {"epoch": epoch, "loss": epoch_loss, "train_loss": float(np.mean(batch_losses))}
        history.append(row)
        log.info("pretrain epoch %d loss %.6f train %.6f", epoch, epoch_loss, row["train_loss"])
        if on_epoch is not None:
            on_epoch(row)
        if tracker.update(epoch, epoch_loss):
            best_state = copy.deepcopy(model.state_dict())
        if tracker.saturated:
            stopped_early = epoch < cfg.max_epochs
            break

    model.load_state_dict(best_state)
    cfg_payload = {
        "encoder": encoder_cfg.to_dict(),
        "projection": head_cfg.to_dict(),
        "pretrain": asdict(cfg),
        "augment": policy.to_dict(),
    }
    metadata = {
        "kind": "contrastive",
        **cfg_payload,
        "config_digest": config_digest(cfg_payload),
        "epoch": tracker.best_epoch,
        "final_loss": tracker.best,
        "seed": cfg.seed,
    }
    ckpt = Checkpoint(named_tensors(model), metadata)
    return PretrainResult(ckpt, history, tracker.best_epoch, stopped_early)
