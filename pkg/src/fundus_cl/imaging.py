"""Image loading, resizing and quality-based exclusion."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .data import DatasetManifest

LUMA = np.array([0.299, 0.587, 0.114])
LAPLACIAN_3X3 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
REASONS = ("io", "luminance", "sharpness", "clipped")


class ImageLoadError(IOError):
    pass


def load_image(uri: str | Path) -> np.ndarray:
    """Decode an 8/16-bit RGB PNG or JPEG into an H x W x 3 float array in [0, 1]."""
    raw = cv2.imread(str(uri), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageLoadError(f"cannot decode image {uri}")
    if raw.ndim != 3 or raw.shape[2] != 3:
        channels = 1 if raw.ndim == 2 else raw.shape[2]
        raise ImageLoadError(f"{uri}: expected 3 colour channels, got {channels}")
    if raw.shape[0] == 0 or raw.shape[1] == 0:
        raise ImageLoadError(f"{uri}: zero-area image")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageLoadError(f"{uri}: unsupported sample type {raw.dtype}")
    return raw[:, :, ::-1].astype(np.float64) / scale


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write an RGB float image as 8-bit PNG."""
    data = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), np.ascontiguousarray(data[:, :, ::-1])):
        raise ImageLoadError(f"cannot write image {path}")


def _interp_axis(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the corner pixel centres of input and output aligned."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"degenerate target size {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    r0, r1, fy = _interp_axis(h, out_h)
    c0, c1, fx = _interp_axis(w, out_w)
    fy = fy[:, None, None]
    rows = img[r0] * (1.0 - fy) + img[r1] * fy
    fx = fx[None, :, None]
    out = rows[:, c0] * (1.0 - fx) + rows[:, c1] * fx
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class QualityMetrics:
    mean_luminance: float
    sharpness: float
    clipped_fraction: float


@dataclass(frozen=True)
class QualityThresholds:
    min_luminance: float = 0.05
    min_sharpness: float = 1e-4
    max_clipped: float = 0.6

    def __post_init__(self):
        vals = (self.min_luminance, self.min_sharpness, self.max_clipped)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("quality thresholds must be finite")

    def violation(self, m: QualityMetrics) -> str | None:
        """First violated criterion, checked in a fixed order, or None."""
        if m.mean_luminance < self.min_luminance:
            return "luminance"
        if m.sharpness < self.min_sharpness:
            return "sharpness"
        if m.clipped_fraction > self.max_clipped:
            return "clipped"
        return None


def luminance(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ LUMA


def laplacian_response(lum: np.ndarray) -> np.ndarray:
    """3x3 Laplacian over interior pixels only (no padding)."""
    c = lum[1:-1, 1:-1]
    return lum[:-2, 1:-1] + lum[2:, 1:-1] + lum[1:-1, :-2] + lum[1:-1, 2:] - 4.0 * c


def quality_metrics(img: np.ndarray) -> QualityMetrics:
    """Brightness, Laplacian-variance sharpness and saturated-sample share.

    ``clipped_fraction`` counts individual channel samples equal to 0 or 1.
    """
    img = np.asarray(img, dtype=np.float64)
    lum = luminance(img)
    resp = laplacian_response(lum)
    sharp = float(resp.var()) if resp.size else 0.0
    clipped = float(np.mean((img <= 0.0) | (img >= 1.0)))
    return QualityMetrics(float(lum.mean()), sharp, clipped)


def _assess(record, thresholds: QualityThresholds) -> str | None:
    try:
        img = load_image(record.image_uri)
    except (ImageLoadError, OSError):
        return "io"
    return thresholds.violation(quality_metrics(img))


def filter_quality(
    manifest: DatasetManifest,
    thresholds: QualityThresholds = QualityThresholds(),
    jobs: int = 1,
) -> tuple[DatasetManifest, DatasetManifest, dict[str, str]]:
    """Split a manifest into (kept, excluded, {image_id: reason}).

    Unreadable images are excluded with reason ``io``; both outputs keep
    input order.
    """
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            verdicts = list(pool.map(lambda r: _assess(r, thresholds), manifest.records))
    else:
        verdicts = [_assess(r, thresholds) for r in manifest.records]
    reasons = {r.image_id: v for r, v in zip(manifest.records, verdicts) if v is not None}
    kept = manifest.subset(r.image_id for r in manifest.records if r.image_id not in reasons)
    excluded = DatasetManifest([r for r in manifest.records if r.image_id in reasons])
    return kept, excluded, reasons


def write_exclusion_report(excluded: DatasetManifest, reasons: dict[str, str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "reason"])
        for r in excluded.records:
            w.writerow([r.image_id, reasons[r.image_id]])
