"""fundus-cl command-line interface.

Exit codes: 0 success, 1 internal error or divergence, 2 usage/precondition failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import synth
from .augment import load_style_bank, style_preview
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DatasetManifest, ManifestError, make_patient_splits, read_manifest, read_splits, subsample_labeled, \
    write_manifest, write_splits, kfold_split
from .finetune import (
    INITS,
    LabeledImages,
    build_classifier,
    classifier_checkpoint,
    classifier_from_checkpoint,
    finetune,
    hyperparameter_search,
    predict_manifest,
    predict_proba,
)
from .imaging import ImageLoadError, filter_quality, load_image, save_image, write_exclusion_report
from .models import ShapeMismatchError
from .pretrain import InsufficientDataError, TrainingDivergedError, load_images, pretrain
from .rng import substream
from .stats import SingleClassError, delong_test, evaluate, operating_point, roc_points
from .sweeps import (
    SWEEP_COLUMNS,
    batch_size_sweep,
    label_efficiency_sweep,
    monotonicity,
    nst_ablation,
    resolve_params,
    summarise,
    write_table,
)
from .plots import roc_svg, sweep_svg

log = logging.getLogger("fundus_cl")


class UsageError(Exception):
    """Precondition failure reported with exit code 2."""


# -- run directory bookkeeping ---------------------------------------------------


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings, tuples become lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


class RunDir:
    """Output folder holding the resolved config, its digest-bearing run id and a run record."""

    def __init__(self, out: str | Path, cfg: config_mod.RunConfig, command: str):
        self.path = Path(out)
        self.path.mkdir(parents=True, exist_ok=True)
        self.cfg, self.command = cfg, command
        self.digest = cfg.digest()
        (self.path / "config.toml").write_text(cfg.canonical())
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        # The timestamp lives only here so CSV/JSON outputs stay byte-identical across reruns.
        (self.path / "RUN_ID").write_text(f"{stamp}-{self.digest[:16]}\n")
        self.artifacts: dict[str, str] = {"config": "config.toml"}
        self.metrics: dict = {}

    def file(self, name: str, key: str | None = None) -> Path:
        self.artifacts[key or name] = name
        return self.path / name

    def finish(self) -> None:
        write_json({"command": self.command, "config_digest": self.digest, "artifacts": self.artifacts,
                    "metrics": self.metrics}, self.path / "run.json")


# -- data helpers ------------------------------------------------------------------


def _require(path: str, what: str) -> str:
    if not path:
        raise UsageError(f"no {what} configured")
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def labeled_splits(cfg) -> tuple[DatasetManifest, DatasetManifest | None, DatasetManifest]:
    """(train, val or None, test) manifests from the [data] section."""
    manifest = read_manifest(_require(cfg.data.manifest, "data.manifest"))
    if cfg.data.test_manifest:
        return manifest, None, read_manifest(_require(cfg.data.test_manifest, "data.test_manifest"))
    if cfg.data.splits_csv:
        manifest = read_splits(manifest, _require(cfg.data.splits_csv, "data.splits_csv"))
    else:
        fractions = {"train": cfg.data.split_train, "val": cfg.data.split_val, "test": cfg.data.split_test}
        manifest = make_patient_splits(manifest, fractions, cfg.seed)
    val = manifest.split("val")
    return manifest.split("train"), (val if len(val) else None), manifest.split("test")


def _style_bank(cfg, policy):
    if policy.p_nst == 0:
        return None
    bank = load_style_bank(_require(cfg.data.style_dir, "data.style_dir (needed when p_nst > 0)"))
    if not len(bank):
        raise UsageError(f"style bank {cfg.data.style_dir} holds no PNG/JPEG images")
    return bank


def _unlabeled_images(cfg, jobs: int):
    path = cfg.data.unlabeled_manifest or cfg.data.manifest
    manifest = read_manifest(_require(path, "data.unlabeled_manifest"))
    return load_images(manifest, cfg.data.load_size or None, jobs)


def _load_cl_checkpoint(path, cfg):
    if not path:
        raise UsageError("--checkpoint is required for the contrastive (cl) init")
    return load_checkpoint(_require(path, "checkpoint"), cfg.encoder_config())


def _seeds(cfg) -> list[int]:
    return [cfg.seed + i for i in range(cfg.sweep.seeds)]


# -- commands ------------------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    manifest = synth.generate(args.out, args.n, args.kind, cfg.seed, args.size, args.n_styles, args.start, args.prefix)
    labels = manifest.labels
    print(f"wrote {len(manifest)} images ({int(labels.sum())} referable, {int(len(labels) - labels.sum())} "
          f"non-referable) and {args.n_styles} styles to {args.out}")
    return 0


def cmd_ingest(args, cfg) -> int:
    path = args.manifest or cfg.data.manifest
    manifest = read_manifest(_require(path, "manifest"))
    run = RunDir(args.out, cfg, "ingest")
    kept, excluded, reasons = filter_quality(manifest, cfg.thresholds(), args.jobs)
    write_manifest(kept, run.file("kept.csv"))
    write_manifest(excluded, run.file("excluded.csv"))
    write_exclusion_report(excluded, reasons, run.file("exclusion_report.csv"))
    if len(kept):
        fractions = {"train": cfg.data.split_train, "val": cfg.data.split_val, "test": cfg.data.split_test}
        write_splits(make_patient_splits(kept, fractions, cfg.seed), run.file("splits.csv"))
    counts = Counter(reasons.values())
    run.metrics = {"kept": len(kept), "excluded": len(excluded), "reasons": dict(sorted(counts.items()))}
    run.finish()
    print(f"kept {len(kept)} excluded {len(excluded)}")
    for reason, n in sorted(counts.items()):
        print(f"  {reason}: {n}")
    return 0


def cmd_pretrain(args, cfg) -> int:
    policy = cfg.policy()
    bank = _style_bank(cfg, policy)
    images = _unlabeled_images(cfg, args.jobs)
    run = RunDir(args.out, cfg, "pretrain")
    res = pretrain(images, policy, bank, cfg.encoder_config(), cfg.head_config(), cfg.pretrain_config(), jobs=args.jobs)
    save_checkpoint(res.checkpoint, run.file("checkpoint.bin", "checkpoint"))
    write_table(res.history, ("epoch", "loss", "train_loss"), run.file("loss.csv"))
    run.metrics = {"best_epoch": res.best_epoch, "best_loss": min(res.losses), "epochs_run": len(res.history),
                   "stopped_early": res.stopped_early}
    run.finish()
    print(f"pretrained {len(res.history)} epochs; best loss {min(res.losses):.6f} at epoch {res.best_epoch}")
    return 0


def cmd_finetune(args, cfg) -> int:
    init = {"cl": "contrastive_checkpoint", "random": "random_baseline"}[args.init]
    ckpt = _load_cl_checkpoint(args.checkpoint, cfg) if args.init == "cl" else None
    if args.init == "random" and args.checkpoint:
        raise UsageError("--checkpoint only applies to --init cl")
    fraction = cfg.finetune.label_fraction if args.fraction is None else args.fraction
    ft_cfg = cfg.finetune_config(init, fraction)
    enc = cfg.encoder_config()
    policy = cfg.policy(p_nst=0.0)
    train_m, val_m, _ = labeled_splits(cfg)
    sub = DatasetManifest(subsample_labeled(train_m, fraction, cfg.seed).training_records())
    if len(set(sub.labels.tolist())) < 2:
        raise UsageError("training split holds a single class")
    needed = sub if val_m is None else DatasetManifest(list(sub.records) + list(val_m.records))
    images = LabeledImages.from_manifest(needed, enc.input_size)

    run = RunDir(args.out, cfg, "finetune")
    search = hyperparameter_search(images, sub, ft_cfg, enc, ckpt, policy)
    write_table(search.table, ("lr", "optimizer", "batch", "fold", "val_auc", "status"), run.file("cv_table.csv"))

    if val_m is None or len(set(val_m.labels.tolist())) < 2:
        tr, va = kfold_split(sub, ft_cfg.folds, cfg.seed)[0]
    else:
        tr, va = sub, val_m
    model = build_classifier(init, enc, ckpt, cfg.seed)
    res = finetune(model, images.subset(tr.ids), images.subset(va.ids), search.best, ft_cfg.epochs, policy,
                   cfg.seed, ft_cfg.freeze_encoder, stream=("final",))
    val = images.subset(va.ids)
    threshold = operating_point(predict_proba(res.model, val.images), val.labels)[0]
    chosen = {"learning_rate": search.best.learning_rate, "optimizer": search.best.optimizer,
              "batch_size": search.best.batch_size}
    meta = {"init": init, "label_fraction": fraction, "hyperparameters": chosen, "threshold": threshold,
            "val_auc": res.best_val_auc, "best_epoch": res.best_epoch, "seed": cfg.seed,
            "source_checkpoint_digest": ckpt.metadata.get("config_digest") if ckpt else None}
    save_checkpoint(classifier_checkpoint(res.model, _clean(meta)), run.file("model.bin", "model"))
    write_json({**chosen, "threshold": threshold, "val_auc": res.best_val_auc}, run.file("hyperparams.json"))
    write_table(res.history, ("epoch", "train_loss", "val_auc"), run.file("history.csv"))
    run.metrics = {"val_auc": res.best_val_auc, "n_train": len(tr), "n_val": len(va)}
    run.finish()
    print(f"fine-tuned ({args.init}, fraction {fraction}) with {chosen}; best val AUC {res.best_val_auc:.4f}")
    return 0


def _read_scores(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["image_id"]: float(row["score"]) for row in csv.DictReader(fh)}


def cmd_eval(args, cfg) -> int:
    try:
        ckpt = load_checkpoint(_require(args.model, "model"))
        model = classifier_from_checkpoint(ckpt)
    except (CheckpointError, ValueError) as exc:
        raise UsageError(f"cannot load model: {exc}") from exc
    test = read_manifest(args.manifest) if args.manifest else labeled_splits(cfg)[2]
    probs, errors = predict_manifest(model, test)
    ok = [i for i, r in enumerate(test.records) if r.image_id not in errors]
    ids = [test.records[i].image_id for i in ok]
    scores, labels = probs[ok], test.labels[ok]
    if len(set(labels.tolist())) < 2:
        raise UsageError("test set must contain both classes")
    run = RunDir(args.out, cfg, "eval")
    threshold = ckpt.metadata.get("threshold")
    threshold = float(threshold) if isinstance(threshold, (int, float)) else None
    report = evaluate(scores, labels, threshold, cfg.eval.bootstrap_resamples, cfg.seed)

    with open(run.file("scores.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "score", "label"])
        for image_id, s, y in zip(ids, scores, labels):
            w.writerow([image_id, repr(float(s)), int(y)])
    points = roc_points(scores, labels)
    with open(run.file("roc.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for p in points:
            w.writerow([repr(p.threshold), repr(p.fpr), repr(p.tpr)])
    roc_svg([p.fpr for p in points], [p.tpr for p in points], report.auc, run.file("roc.svg"))

    if args.compare:
        other = _read_scores(_require(args.compare, "comparison scores"))
        missing = [i for i in ids if i not in other]
        if missing:
            raise UsageError(f"comparison scores lack {len(missing)} test images, e.g. {missing[:3]}")
        d = delong_test(scores, np.array([other[i] for i in ids]), labels)
        other_run = Path(args.compare).parent / "run.json"
        other_id = json.loads(other_run.read_text()).get("config_digest", "") if other_run.exists() else ""
        report.comparisons.append({"other": other_id or Path(args.compare).name, "auc_other": d.auc_b,
                                   "z": d.z, "p": d.p})
    out = report.to_dict()
    out["failed_records"] = dict(sorted(errors.items()))
    write_json(out, run.file("report.json"))
    run.metrics = {"auc": report.auc}
    run.finish()
    print(f"AUC {report.auc:.4f} [{report.auc_ci[0]:.4f}, {report.auc_ci[1]:.4f}]  "
          f"sens {report.sensitivity:.3f}  spec {report.specificity:.3f}")
    for c in report.comparisons:
        print(f"  vs {c['other']}: z {c['z']:.3f}  p {c['p']:.4g}")
    return 0


def _sweep_inputs(cfg):
    enc = cfg.encoder_config()
    train_m, _, test_m = labeled_splits(cfg)
    if len(set(test_m.labels.tolist())) < 2:
        raise UsageError("test split must contain both classes")
    everything = DatasetManifest(list(train_m.records) + list(test_m.records))
    labeled = LabeledImages.from_manifest(everything, enc.input_size)
    return enc, train_m, labeled, labeled.subset(test_m.ids)


def _success_exit(rows) -> int:
    ok = sum(r.get("status", "ok") == "ok" for r in rows)
    if ok < 0.8 * len(rows):
        print(f"only {ok}/{len(rows)} sweep cells succeeded", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args, cfg) -> int:
    enc, train_m, labeled, test = _sweep_inputs(cfg)
    policy = cfg.policy()
    ft_policy = cfg.policy(p_nst=0.0)
    seeds = _seeds(cfg)
    run = RunDir(args.out, cfg, f"sweep-{args.kind}")

    if args.kind == "labels":
        ckpt = _load_cl_checkpoint(args.checkpoint, cfg) if "cl" in cfg.sweep.inits else None
        rows = label_efficiency_sweep(cfg.sweep.fractions, cfg.sweep.inits, seeds, ckpt, enc, train_m, labeled,
                                      test, cfg.finetune_config(), ft_policy, cfg.sweep.research_per_fraction)
        summary = summarise(rows, "fraction")
        write_table(rows, SWEEP_COLUMNS, run.file("sweep.csv"))
        write_table(summary, ("fraction", "init", "n", "mean_auc", "sd_auc"), run.file("summary.csv"))
        sweep_svg(summary, "fraction", "labelled training fraction", run.file("sweep.svg"))
    elif args.kind == "batch":
        images = _unlabeled_images(cfg, args.jobs)
        params = resolve_params(cfg.finetune_config(), train_m, labeled, enc, None, ft_policy)
        rows, direction = batch_size_sweep(
            cfg.sweep.batch_sizes, seeds, images, _style_bank(cfg, policy), policy, enc, cfg.head_config(),
            cfg.pretrain_config(), train_m, labeled, test, params, cfg.sweep.batch_label_fraction,
            cfg.finetune.epochs, cfg.finetune.folds, args.jobs)
        for r in rows:
            r["init"] = "cl"
        summary = summarise(rows, "batch_size")
        write_table(rows, ("batch_size", "seed", "auc", "sens", "spec"), run.file("sweep.csv"))
        write_table(summary, ("batch_size", "init", "n", "mean_auc", "sd_auc"), run.file("summary.csv"))
        sweep_svg(summary, "batch_size", "pretraining batch size", run.file("sweep.svg"), log_x=True)
        run.metrics["direction"] = direction
        print(f"mean AUC vs batch size: {direction}")
    else:
        if args.checkpoint and args.baseline_checkpoint:
            cks = {"nst": _load_cl_checkpoint(args.checkpoint, cfg),
                   "no_nst": _load_cl_checkpoint(args.baseline_checkpoint, cfg)}
        else:
            images = _unlabeled_images(cfg, args.jobs)
            bank = _style_bank(cfg, policy)
            cks = {}
            for arm, p in (("nst", policy), ("no_nst", cfg.policy(p_nst=0.0))):
                res = pretrain(images, p, bank if arm == "nst" else None, enc, cfg.head_config(),
                               cfg.pretrain_config(), jobs=args.jobs)
                cks[arm] = res.checkpoint
                save_checkpoint(res.checkpoint, run.file(f"checkpoint_{arm}.bin"))
        params = resolve_params(cfg.finetune_config(), train_m, labeled, enc, cks["nst"], ft_policy)
        rows = nst_ablation(seeds, cks, enc, train_m, labeled, test, params, cfg.sweep.nst_label_fraction,
                            cfg.finetune.epochs, ft_policy, cfg.finetune.folds)
        write_table(rows, ("seed", "auc_nst", "auc_no_nst", "z", "p"), run.file("nst_ablation.csv"))
        ok = [r for r in rows if r["status"] == "ok"]
        run.metrics = {"mean_auc_nst": float(np.mean([r["auc_nst"] for r in ok])) if ok else float("nan"),
                       "mean_auc_no_nst": float(np.mean([r["auc_no_nst"] for r in ok])) if ok else float("nan")}
        print(f"mean AUC with NST {run.metrics['mean_auc_nst']:.4f}, without {run.metrics['mean_auc_no_nst']:.4f}")
    run.metrics["cells"] = len(rows)
    run.metrics["failed_cells"] = sum(r.get("status", "ok") != "ok" for r in rows)
    run.finish()
    print(f"{len(rows)} sweep rows written to {run.path}")
    return _success_exit(rows)


def cmd_style_preview(args, cfg) -> int:
    policy = cfg.policy()
    bank = load_style_bank(_require(cfg.data.style_dir, "data.style_dir"))
    manifest = read_manifest(_require(args.manifest or cfg.data.manifest, "manifest"))
    images = [load_image(r.image_uri) for r in manifest.records[: args.n]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = style_preview(images, bank, policy, substream(cfg.seed, "style-preview"))
    for k, (before, after) in enumerate(pairs):
        save_image(before, out / f"preview_{k:03d}_before.png")
        save_image(after, out / f"preview_{k:03d}_after.png")
    print(f"wrote {len(pairs)} before/after pairs to {out}")
    return 0


# -- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fundus-cl", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (TOML)")
    common.add_argument("--seed", type=int, help="override the config's root seed")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for loading/augmentation")
    common.add_argument("--out", default="runs/out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic shape-vs-texture fixture")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--kind", default="shape_vs_texture", choices=synth.KINDS)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-styles", type=int, default=16)
    p.add_argument("--start", type=int, default=0, help="index of the first image")
    p.add_argument("--prefix", default="img", help="image/patient id prefix")

    p = sub.add_parser("ingest", parents=[common], help="quality-filter a manifest")
    p.add_argument("--manifest")

    sub.add_parser("pretrain", parents=[common], help="contrastive pretraining")

    p = sub.add_parser("finetune", parents=[common], help="supervised fine-tuning with CV grid search")
    p.add_argument("--init", choices=("cl", "random"), required=True)
    p.add_argument("--fraction", type=float)
    p.add_argument("--checkpoint")

    p = sub.add_parser("eval", parents=[common], help="score a test set and write the evaluation report")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", help="test manifest (defaults to the config's test split)")
    p.add_argument("--compare", help="scores.csv of another model for DeLong's test")

    p = sub.add_parser("sweep", parents=[common], help="label-fraction, batch-size or NST-ablation sweep")
    p.add_argument("--kind", choices=("labels", "batch", "nst"), required=True)
    p.add_argument("--checkpoint", help="contrastive checkpoint (labels sweep; NST arm of the nst sweep)")
    p.add_argument("--baseline-checkpoint", help="no-NST checkpoint for the nst sweep")
    p.add_argument("--research-per-fraction", action="store_true", help="re-run the grid search at every fraction")

    p = sub.add_parser("style-preview", parents=[common], help="write before/after style-transfer PNGs")
    p.add_argument("--manifest")
    p.add_argument("--n", type=int, default=4)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "style-preview": cmd_style_preview,
}

PRECONDITION_ERRORS = (UsageError, ManifestError, config_mod.ConfigError, InsufficientDataError, SingleClassError,
                       ShapeMismatchError, CheckpointError, ImageLoadError, FileNotFoundError)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FUNDUS_CL_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = config_mod.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "research_per_fraction", False):
            cfg.sweep.research_per_fraction = True
        return COMMANDS[args.command](args, cfg)
    except ManifestError as exc:
        rows = f" (rows {exc.rows})" if exc.rows else ""
        print(f"error: {exc}{rows}", file=sys.stderr)
        return 2
    except PRECONDITION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
