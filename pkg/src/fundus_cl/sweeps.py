"""Label-efficiency, pretraining batch-size and NST-ablation harnesses."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .augment import AugmentationPolicy, StyleBank
from .checkpoint import Checkpoint
from .data import DatasetManifest, kfold_split, subsample_labeled
from .finetune import (
    FinetuneConfig,
    LabeledImages,
    TrainParams,
    build_classifier,
    finetune,
    hyperparameter_search,
    predict_proba,
)
from .models import EncoderConfig, ProjectionHeadConfig
from .pretrain import PretrainConfig, TrainingDivergedError, pretrain
from .stats import SingleClassError, auc, delong_test, operating_point, sens_spec

log = logging.getLogger(__name__)

INIT_NAMES = {"cl": "contrastive_checkpoint", "random": "random_baseline"}
SWEEP_COLUMNS = ("fraction", "init", "seed", "auc", "sens", "spec")
CELL_ERRORS = (TrainingDivergedError, ValueError, RuntimeError, FloatingPointError)


@dataclass
class CellResult:
    row: dict
    test_scores: np.ndarray | None = None


def run_cell(
    init: str,
    checkpoint: Checkpoint | None,
    encoder_cfg: EncoderConfig,
    train_manifest: DatasetManifest,
    labeled: LabeledImages,
    test: LabeledImages,
    params: TrainParams,
    fraction: float,
    seed: int,
    epochs: int,
    policy: AugmentationPolicy | None = None,
    folds: int = 5,
    freeze_encoder: bool = False,
) -> CellResult:
    """subsample -> fine-tune -> score the fixed test set.

    One patient-level fold of the subsample is held out for epoch selection
    and for the Youden threshold that is then applied to the test set.
    """
    row = {"fraction": fraction, "init": init, "seed": seed, "auc": float("nan"),
           "sens": float("nan"), "spec": float("nan"), "status": "ok"}
    try:
        sub = subsample_labeled(train_manifest, fraction, seed)
        pool = DatasetManifest(sub.training_records())
        tr, va = kfold_split(pool, min(folds, len({r.patient_id for r in pool.records})), seed)[0]
        model = build_classifier(INIT_NAMES[init], encoder_cfg, checkpoint if init == "cl" else None, seed)
        res = finetune(model, labeled.subset(tr.ids), labeled.subset(va.ids), params, epochs, policy, seed,
                       freeze_encoder, stream=("sweep", init, fraction))
        val = labeled.subset(va.ids)
        threshold = operating_point(predict_proba(res.model, val.images), val.labels)[0]
        scores = predict_proba(res.model, test.images)
        row["auc"] = auc(scores, test.labels)
        row["sens"], row["spec"] = sens_spec(scores, test.labels, threshold)
        return CellResult(row, scores)
    except CELL_ERRORS as exc:
        log.warning("sweep cell %s failed: %s", row, exc)
        row["status"] = "failed"
        return CellResult(row)


def resolve_params(cfg: FinetuneConfig, train_manifest, labeled, encoder_cfg, checkpoint, policy) -> TrainParams:
    grid = cfg.grid()
    if len(grid) == 1:
        return grid[0]
    pool = DatasetManifest(subsample_labeled(train_manifest, cfg.label_fraction, cfg.seed).training_records())
    return hyperparameter_search(labeled, pool, cfg, encoder_cfg, checkpoint, policy).best


def label_efficiency_sweep(
    fractions: Sequence[float],
    inits: Sequence[str],
    seeds: Sequence[int],
    checkpoint: Checkpoint | None,
    encoder_cfg: EncoderConfig,
    train_manifest: DatasetManifest,
    labeled: LabeledImages,
    test: LabeledImages,
    ft_cfg: FinetuneConfig,
    policy: AugmentationPolicy | None = None,
    research_per_fraction: bool = False,
) -> list[dict]:
    """Long-format table, one row per (fraction, init, seed), sorted in that order."""
    if "cl" in inits and checkpoint is None:
        raise ValueError("the cl arm needs a contrastive checkpoint")
    rows = []
    for init in inits:
        ck = checkpoint if init == "cl" else None
        cfg = replace(ft_cfg, init=INIT_NAMES[init])
        params = None if research_per_fraction else resolve_params(
            replace(cfg, label_fraction=1.0), train_manifest, labeled, encoder_cfg, ck, policy)
        for fraction in fractions:
            p = params or resolve_params(replace(cfg, label_fraction=fraction), train_manifest, labeled,
                                         encoder_cfg, ck, policy)
            for seed in seeds:
                rows.append(run_cell(init, ck, encoder_cfg, train_manifest, labeled, test, p, fraction, seed,
                                     cfg.epochs, policy, cfg.folds, cfg.freeze_encoder).row)
    rows.sort(key=lambda r: (r["fraction"], r["init"], r["seed"]))
    return rows


def summarise(rows: list[dict], key: str) -> list[dict]:
    """Mean and sample sd of AUC over seeds per (key, init); failed cells are skipped."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r[key], r.get("init", "")), [])
        if r.get("status", "ok") == "ok" and np.isfinite(r["auc"]):
            groups[(r[key], r.get("init", ""))].append(r["auc"])
    out = []
    for (k, init), vals in sorted(groups.items()):
        out.append({key: k, "init": init, "n": len(vals),
                    "mean_auc": float(np.mean(vals)) if vals else float("nan"),
                    "sd_auc": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0})
    return out


def monotonicity(summary: list[dict], key: str) -> str:
    means = [s["mean_auc"] for s in sorted(summary, key=lambda s: s[key]) if np.isfinite(s["mean_auc"])]
    if len(means) < 2:
        return "n/a"
    diffs = np.diff(means)
    if np.all(diffs >= 0):
        return "non-decreasing"
    if np.all(diffs <= 0):
        return "non-increasing"
    return "mixed"


def batch_size_sweep(
    sizes: Sequence[int],
    seeds: Sequence[int],
    unlabeled: list[np.ndarray],
    style_bank: StyleBank | None,
    policy: AugmentationPolicy,
    encoder_cfg: EncoderConfig,
    head_cfg: ProjectionHeadConfig,
    pretrain_template: PretrainConfig,
    train_manifest: DatasetManifest,
    labeled: LabeledImages,
    test: LabeledImages,
    params: TrainParams,
    fraction: float = 1.0,
    epochs: int = 30,
    folds: int = 5,
    jobs: int = 1,
) -> tuple[list[dict], str]:
    """Pretrain at each batch size, fine-tune identically, report downstream test AUC.

    Returns the table and the direction of mean AUC as batch size grows
    (reported, never asserted).
    """
    for size in sizes:
        if size < 2 or size > len(unlabeled):
            raise ValueError(f"batch size {size} outside [2, {len(unlabeled)}]")
    rows = []
    for size in sizes:
        for seed in seeds:
            row = {"batch_size": size, "seed": seed, "auc": float("nan"), "sens": float("nan"),
                   "spec": float("nan"), "status": "ok"}
            try:
                cfg = replace(pretrain_template, batch_size=size, seed=seed)
                ck = pretrain(unlabeled, policy, style_bank, encoder_cfg, head_cfg, cfg, jobs=jobs).checkpoint
                cell = run_cell("cl", ck, encoder_cfg, train_manifest, labeled, test, params, fraction, seed,
                                epochs, policy, folds)
                row.update({k: cell.row[k] for k in ("auc", "sens", "spec", "status")})
            except CELL_ERRORS as exc:
                log.warning("batch size %d seed %d failed: %s", size, seed, exc)
                row["status"] = "failed"
            rows.append(row)
    rows.sort(key=lambda r: (r["batch_size"], r["seed"]))
    return rows, monotonicity(summarise(rows, "batch_size"), "batch_size")


def nst_ablation(
    seeds: Sequence[int],
    checkpoints: dict[str, Checkpoint],
    encoder_cfg: EncoderConfig,
    train_manifest: DatasetManifest,
    labeled: LabeledImages,
    test: LabeledImages,
    params: TrainParams,
    fraction: float = 1.0,
    epochs: int = 30,
    policy: AugmentationPolicy | None = None,
    folds: int = 5,
) -> list[dict]:
    """Per seed: fine-tune from the NST and the no-NST checkpoints, DeLong-compare on test."""
    rows = []
    for seed in seeds:
        a = run_cell("cl", checkpoints["nst"], encoder_cfg, train_manifest, labeled, test, params, fraction,
                     seed, epochs, policy, folds)
        b = run_cell("cl", checkpoints["no_nst"], encoder_cfg, train_manifest, labeled, test, params, fraction,
                     seed, epochs, policy, folds)
        row = {"seed": seed, "auc_nst": a.row["auc"], "auc_no_nst": b.row["auc"], "z": float("nan"),
               "p": float("nan"), "status": "ok"}
        if a.test_scores is None or b.test_scores is None:
            row["status"] = "failed"
        else:
            try:
                d = delong_test(a.test_scores, b.test_scores, test.labels)
                row["z"], row["p"] = d.z, d.p
            except SingleClassError:
                row["status"] = "failed"
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if not np.isfinite(v) else repr(round(v, 12))
    return str(v)


def write_table(rows: list[dict], columns: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
