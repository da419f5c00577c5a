"""ROC analysis, DeLong's paired AUC test and bootstrap confidence intervals."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy import stats as sps

from .rng import substream


class SingleClassError(ValueError):
    """Raised when a statistic needs both classes but only one is present."""


def _checked(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores and labels must be aligned 1-D arrays, got {s.shape} and {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    y = y.astype(np.int64)
    if y.min(initial=1) == 1 or y.max(initial=0) == 0:
        raise SingleClassError("both classes must be present")
    return s, y


@dataclass(frozen=True)
class RocPoint:
    fpr: float
    tpr: float
    threshold: float


def roc_points(scores, labels) -> list[RocPoint]:
    """ROC vertices for thresholds at each distinct score (score >= t is positive).

    The first point is the (0, 0) sentinel at threshold +inf; points run in
    descending threshold order and end at (1, 1).
    """
    s, y = _checked(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    tp, fp = np.cumsum(y), np.cumsum(1 - y)
    # Last index of each run of equal scores.
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    points = [RocPoint(0.0, 0.0, float("inf"))]
    points += [RocPoint(fp[i] / n_neg, tp[i] / n_pos, float(s[i])) for i in ends]
    return points


def mann_whitney_count(scores, labels) -> tuple[int, int]:
    """(2U, m*n): twice the Mann-Whitney U with ties counting 1/2, and the pair count."""
    s, y = _checked(scores, labels)
    pos, neg = s[y == 1], np.sort(s[y == 0])
    below = np.searchsorted(neg, pos, side="left")
    tied = np.searchsorted(neg, pos, side="right") - below
    return int(2 * below.sum() + tied.sum()), len(pos) * len(neg)


def auc_exact(scores, labels) -> Fraction:
    twice_u, pairs = mann_whitney_count(scores, labels)
    return Fraction(twice_u, 2 * pairs)


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    twice_u, pairs = mann_whitney_count(scores, labels)
    return twice_u / (2 * pairs)


def trapezoid_auc(points: list[RocPoint]) -> float:
    fpr = np.array([p.fpr for p in points])
    tpr = np.array([p.tpr for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def sens_spec(scores, labels, threshold: float) -> tuple[float, float]:
    s, y = _checked(scores, labels)
    pred = s >= threshold
    return float(pred[y == 1].mean()), float((~pred[y == 0]).mean())


def operating_point(scores, labels, rule: str = "youden") -> tuple[float, float, float]:
    """(threshold, sensitivity, specificity) maximising Youden's J; ties pick the lower threshold."""
    if rule != "youden":
        raise ValueError(f"unknown operating-point rule {rule!r}")
    best = None
    for p in roc_points(scores, labels):
        j = p.tpr - p.fpr
        # Points arrive in descending threshold order, so >= keeps the lowest threshold.
        if best is None or j >= best[0]:
            best = (j, p)
    p = best[1]
    return p.threshold, p.tpr, 1.0 - p.fpr


@dataclass(frozen=True)
class DeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p: float
    variance: float


def _structural_components(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-positive (V10) and per-negative (V01) placement values via midranks."""
    pos, neg = s[y == 1], s[y == 0]
    m, n = len(pos), len(neg)
    r_all = sps.rankdata(np.r_[pos, neg])
    v10 = (r_all[:m] - sps.rankdata(pos)) / n
    v01 = 1.0 - (r_all[m:] - sps.rankdata(neg)) / m
    return v10, v01


def delong_test(scores_a, scores_b, labels, labels_b=None) -> DeLongResult:
    """Paired DeLong test of AUC(A) - AUC(B) on one label vector.

    Degenerate variance (< 1e-12) reports z = 0, p = 1.
    """
    if labels_b is not None and not np.array_equal(np.asarray(labels), np.asarray(labels_b)):
        raise ValueError("DeLong's paired test needs identical label vectors")
    sa, y = _checked(scores_a, labels)
    sb, _ = _checked(scores_b, labels)
    auc_a, auc_b = auc(sa, y), auc(sb, y)
    v10_a, v01_a = _structural_components(sa, y)
    v10_b, v01_b = _structural_components(sb, y)
    m, n = len(v10_a), len(v01_a)
    s10 = np.cov(np.vstack([v10_a, v10_b])) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.vstack([v01_a, v01_b])) if n > 1 else np.zeros((2, 2))
    var = (s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / m + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / n
    if not var >= 1e-12:
        return DeLongResult(auc_a, auc_b, 0.0, 1.0, float(max(var, 0.0)))
    z = (auc_a - auc_b) / np.sqrt(var)
    p = float(min(1.0, 2.0 * sps.norm.sf(abs(z))))
    return DeLongResult(auc_a, auc_b, float(z), p, float(var))


def delong_variance(scores, labels) -> float:
    """DeLong variance estimate of a single AUC."""
    s, y = _checked(scores, labels)
    v10, v01 = _structural_components(s, y)
    return float(np.var(v10, ddof=1) / len(v10) + np.var(v01, ddof=1) / len(v01))


class BootstrapError(RuntimeError):
    pass


def bootstrap_ci(
    metric: Callable[[np.ndarray, np.ndarray], float],
    scores,
    labels,
    resamples: int = 2000,
    seed: int = 0,
    level: float = 0.95,
    max_retries: int = 100,
) -> tuple[float, float]:
    """Percentile bootstrap interval of ``metric`` over index resamples.

    Single-class resamples are redrawn up to ``max_retries`` times and then
    skipped; more than 10% skipped resamples is an error.
    """
    if resamples < 100:
        raise ValueError("need at least 100 resamples")
    s, y = _checked(scores, labels)
    rng = substream(seed, "bootstrap")
    n = len(s)
    values, skipped = [], 0
    for _ in range(resamples):
        for _attempt in range(max_retries + 1):
            idx = rng.integers(0, n, size=n)
            yy = y[idx]
            if 0 < yy.sum() < n:
                values.append(metric(s[idx], yy))
                break
        else:
            skipped += 1
    if skipped > 0.1 * resamples:
        raise BootstrapError(f"metric undefined on {skipped}/{resamples} resamples")
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    return float(lo), float(hi)


@dataclass
class EvalReport:
    auc: float
    auc_ci: tuple[float, float]
    sensitivity: float
    sensitivity_ci: tuple[float, float]
    specificity: float
    specificity_ci: tuple[float, float]
    threshold: float
    n_pos: int
    n_neg: int
    comparisons: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("auc_ci", "sensitivity_ci", "specificity_ci"):
            d[k] = list(d[k])
        return d


def _bracket(ci: tuple[float, float], estimate: float) -> tuple[float, float]:
    return min(ci[0], estimate), max(ci[1], estimate)


def evaluate(scores, labels, threshold: float | None = None, resamples: int = 2000, seed: int = 0) -> EvalReport:
    """AUC, sensitivity and specificity with percentile-bootstrap 95% CIs.

    Without an explicit ``threshold`` the Youden point of these scores is used.
    Intervals are widened, if needed, to contain their point estimate.
    """
    s, y = _checked(scores, labels)
    if threshold is None:
        threshold = operating_point(s, y)[0]
    sens, spec = sens_spec(s, y, threshold)
    a = auc(s, y)
    auc_ci = bootstrap_ci(auc, s, y, resamples, seed)
    sens_ci = bootstrap_ci(lambda ss, yy: sens_spec(ss, yy, threshold)[0], s, y, resamples, seed)
    spec_ci = bootstrap_ci(lambda ss, yy: sens_spec(ss, yy, threshold)[1], s, y, resamples, seed)
    return EvalReport(
        auc=a, auc_ci=_bracket(auc_ci, a),
        sensitivity=sens, sensitivity_ci=_bracket(sens_ci, sens),
        specificity=spec, specificity_ci=_bracket(spec_ci, spec),
        threshold=float(threshold), n_pos=int(y.sum()), n_neg=int(len(y) - y.sum()),
    )
