"""Dataset manifests, referable labelling, patient-level splits and label subsampling."""
from __future__ import annotations

import csv
import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .rng import substream

MANIFEST_HEADER = ("image_id", "image_uri", "grade", "patient_id", "eye")
SPLITS = ("train", "val", "test")
SPLIT_TAGS = SPLITS + ("excluded",)
EYES = ("OD", "OS", "U")
DEFAULT_FRACTION_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))


class ManifestError(ValueError):
    """Malformed manifest content. ``rows`` lists offending 1-based data rows."""

    def __init__(self, message: str, rows: Sequence[int] = ()):
        super().__init__(message)
        self.rows = list(rows)


class DRGrade(enum.IntEnum):
    NO_DR = 0
    MILD = 1
    MODERATE = 2
    SEVERE_NPDR = 3
    PDR = 4


def grade_to_referable(grade: int) -> bool:
    """Referable DR is moderate NPDR or worse (grade >= 2)."""
    return DRGrade(int(grade)) >= DRGrade.MODERATE


@dataclass(frozen=True)
class FundusRecord:
    image_id: str
    image_uri: str
    grade: int
    patient_id: str
    eye: str = "U"

    def __post_init__(self):
        if int(self.grade) not in range(5):
            raise ValueError(f"invalid DR grade {self.grade!r} for {self.image_id}")
        if self.eye not in EYES:
            raise ValueError(f"invalid eye code {self.eye!r} for {self.image_id}")

    @property
    def referable(self) -> bool:
        return grade_to_referable(self.grade)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[FundusRecord, ...]
    split_tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "split_tags", dict(self.split_tags))
        ids = [r.image_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate image_id in manifest")
        known = set(ids)
        for image_id, tag in self.split_tags.items():
            if image_id not in known:
                raise ManifestError(f"split tag for unknown image_id {image_id!r}")
            if tag not in SPLIT_TAGS:
                raise ManifestError(f"unknown split tag {tag!r}")
        owner: dict[str, str] = {}
        for r in self.records:
            tag = self.split_tags.get(r.image_id)
            if tag in SPLITS:
                prev = owner.setdefault(r.patient_id, tag)
                if prev != tag:
                    raise ManifestError(f"patient {r.patient_id!r} appears in both {prev} and {tag}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(r.referable) for r in self.records], dtype=np.int64)

    def split(self, tag: str) -> "DatasetManifest":
        """Records carrying ``tag``, returned untagged."""
        return DatasetManifest([r for r in self.records if self.split_tags.get(r.image_id) == tag])

    def subset(self, ids: Iterable[str]) -> "DatasetManifest":
        keep = set(ids)
        records = [r for r in self.records if r.image_id in keep]
        tags = {k: v for k, v in self.split_tags.items() if k in keep}
        return DatasetManifest(records, tags)

    def training_records(self) -> list[FundusRecord]:
        """Train-tagged records, or every record when the manifest carries no tags."""
        if not self.split_tags:
            return list(self.records)
        return [r for r in self.records if self.split_tags.get(r.image_id) == "train"]


def _patient_groups(records: Iterable[FundusRecord]) -> dict[str, list[FundusRecord]]:
    groups: dict[str, list[FundusRecord]] = defaultdict(list)
    for r in records:
        groups[r.patient_id].append(r)
    return dict(groups)


def _ordered_patients(groups: Mapping[str, list], rng: np.random.Generator) -> list[str]:
    # Sort first so dict insertion order never leaks into the shuffle.
    pids = sorted(groups)
    rng.shuffle(pids)
    return pids


def make_patient_splits(
    manifest: DatasetManifest, fractions: Mapping[str, float], seed: int
) -> DatasetManifest:
    """Tag every record train/val/test with whole patients per split.

    Patients are stratified by their referable-record count and dealt to the
    split furthest below its record target, so each split tracks its target
    class counts to within one patient's worth of records.
    """
    if not manifest.records:
        raise ValueError("cannot split an empty manifest")
    frac = {s: float(fractions.get(s, 0.0)) for s in SPLITS}
    if set(fractions) - set(SPLITS):
        raise ValueError(f"unknown split names {sorted(set(fractions) - set(SPLITS))}")
    if any(v < 0 for v in frac.values()) or abs(sum(frac.values()) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {frac}")

    rng = substream(seed, "data", "patient-splits")
    groups = _patient_groups(manifest.records)
    strata: dict[int, list[str]] = defaultdict(list)
    for pid in _ordered_patients(groups, rng):
        strata[sum(r.referable for r in groups[pid])].append(pid)

    tags: dict[str, str] = {}
    for key in sorted(strata):
        pids = strata[key]
        total = sum(len(groups[p]) for p in pids)
        filled = dict.fromkeys(SPLITS, 0)
        for pid in pids:
            # Largest remaining deficit wins; ties go to the earlier split name.
            target = max(SPLITS, key=lambda s: (frac[s] * total - filled[s], -SPLITS.index(s)))
            filled[target] += len(groups[pid])
            for r in groups[pid]:
                tags[r.image_id] = target
    return DatasetManifest(manifest.records, tags)


def kfold_split(
    manifest: DatasetManifest, k: int, seed: int
) -> list[tuple[DatasetManifest, DatasetManifest]]:
    """Patient-level stratified k-fold over all records of ``manifest``.

    Returns ``k`` (train, val) pairs; each patient validates in exactly one fold.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    groups = _patient_groups(manifest.records)
    if k > len(groups):
        raise ValueError(f"k={k} exceeds patient count {len(groups)}")
    rng = substream(seed, "data", "kfold", k)
    order = _ordered_patients(groups, rng)
    # Stable sort by referable share keeps the shuffle inside each stratum.
    order.sort(key=lambda p: sum(r.referable for r in groups[p]) / len(groups[p]))
    fold_of = {pid: i % k for i, pid in enumerate(order)}
    folds = []
    for i in range(k):
        val = [r for r in manifest.records if fold_of[r.patient_id] == i]
        train = [r for r in manifest.records if fold_of[r.patient_id] != i]
        folds.append((DatasetManifest(train), DatasetManifest(val)))
    return folds


def stratified_quota(n_per_class: Mapping[int, int], fraction: float) -> dict[int, int]:
    """Per-class sample counts: rounded class shares, adjusted to sum to ceil(fraction*n)."""
    n = sum(n_per_class.values())
    total = math.ceil(fraction * n - 1e-9)
    ideal = {c: fraction * m for c, m in n_per_class.items()}
    quota = {c: min(n_per_class[c], int(math.floor(v + 0.5))) for c, v in ideal.items()}
    while sum(quota.values()) < total:
        c = max((c for c in quota if quota[c] < n_per_class[c]), key=lambda c: (ideal[c] - quota[c], -c))
        quota[c] += 1
    while sum(quota.values()) > total:
        c = max((c for c in quota if quota[c] > 0), key=lambda c: (quota[c] - ideal[c], c))
        quota[c] -= 1
    return quota


def subsample_labeled(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Keep ``ceil(fraction * n)`` training records, stratified by referable label.

    Non-training records pass through untouched.  Whole patients are taken
    while they fit in a class quota; the remainder is filled record-wise from
    the next patient in seeded order.
    """
    fraction = float(fraction)
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"label fraction must be in (0, 1], got {fraction}")
    train = manifest.training_records()
    if not train:
        raise ValueError("manifest has no training records")
    by_class: dict[int, list[FundusRecord]] = defaultdict(list)
    for r in train:
        by_class[int(r.referable)].append(r)
    quota = stratified_quota({c: len(v) for c, v in by_class.items()}, fraction)

    chosen: set[str] = set()
    for c in sorted(by_class):
        rng = substream(seed, "data", "subsample", c)
        groups = _patient_groups(by_class[c])
        remaining = quota[c]
        leftovers: list[FundusRecord] = []
        for pid in _ordered_patients(groups, rng):
            g = groups[pid]
            if len(g) <= remaining:
                chosen.update(r.image_id for r in g)
                remaining -= len(g)
            else:
                leftovers.extend(g)
        for r in leftovers[:remaining]:
            chosen.add(r.image_id)

    train_ids = {r.image_id for r in train}
    keep = [r.image_id for r in manifest.records if r.image_id not in train_ids or r.image_id in chosen]
    return manifest.subset(keep)


# -- CSV interfaces -----------------------------------------------------------


def read_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest CSV. Relative image URIs resolve against the CSV's folder."""
    path = Path(path)
    base = path.resolve().parent
    records, bad = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}", [0])
        for rowno, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                image_id, uri, grade, pid, eye = (c.strip() for c in row)
                if not image_id or not uri or not pid:
                    raise ValueError("empty field")
                uri_path = Path(uri)
                if not uri_path.is_absolute():
                    uri_path = base / uri_path
                records.append(FundusRecord(image_id, str(uri_path), int(grade), pid, eye or "U"))
            except (ValueError, TypeError):
                bad.append(rowno)
    if bad:
        raise ManifestError(f"{path}: malformed rows {bad}", bad)
    try:
        return DatasetManifest(records)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            w.writerow([r.image_id, r.image_uri, int(r.grade), r.patient_id, r.eye])


def write_splits(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "split"])
        for r in manifest.records:
            if r.image_id in manifest.split_tags:
                w.writerow([r.image_id, manifest.split_tags[r.image_id]])


def read_splits(manifest: DatasetManifest, path: str | Path) -> DatasetManifest:
    with open(path, newline="") as fh:
        tags = {row["image_id"]: row["split"] for row in csv.DictReader(fh)}
    return replace(manifest, split_tags=tags)
