"""Synthetic two-class fixture: global shape carries the label, texture is nuisance.

Referable images contain an ellipse, non-referable ones a rectangle.  Both
sit on randomly textured, randomly coloured backgrounds, so a model can only
separate the classes by attending to shape.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import DatasetManifest, FundusRecord, write_manifest
from .imaging import save_image
from .rng import substream

KINDS = ("shape_vs_texture",)


def _texture(rng, size: int, colour: np.ndarray) -> np.ndarray:
    """A base colour modulated by a faint grating and fine noise."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(3.0, 8.0)
    grating = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
    field = 0.06 * grating + 0.05 * rng.normal(size=(size, size))
    tint = rng.uniform(0.5, 1.5, size=3)
    return colour + field[..., None] * tint


def _shape_mask(rng, size: int, ellipse: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.4, 0.6, size=2) * size
    ry, rx = rng.uniform(0.2, 0.34, size=2) * size
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    if ellipse:
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return (np.abs(u) <= rx) & (np.abs(v) <= ry)


def synth_image(seed: int, index: int, referable: bool, size: int = 64) -> np.ndarray:
    rng = substream(seed, "synth", "img", index)
    bg_colour = rng.uniform(0.15, 0.85, size=3)
    # Keep a clear luminance step between shape and background.
    step = rng.uniform(0.2, 0.35) * (1.0 if bg_colour.mean() < 0.5 else -1.0)
    fg_colour = np.clip(bg_colour + step + rng.uniform(-0.15, 0.15, size=3), 0.05, 0.95)
    background = _texture(rng, size, bg_colour)
    foreground = _texture(rng, size, fg_colour)
    mask = _shape_mask(rng, size, ellipse=referable)[..., None]
    img = np.where(mask, foreground, background)
    return np.clip(img, 0.02, 0.98)


def synth_style(seed: int, index: int, size: int = 64) -> np.ndarray:
    """An 'artwork': bold colour blocks and strokes with high colour variance."""
    rng = substream(seed, "synth", "style", index)
    img = np.empty((size, size, 3))
    img[:] = rng.uniform(0, 1, size=3)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(6, 14))):
        cy, cx = rng.uniform(0, size, size=2)
        r = rng.uniform(0.05, 0.35) * size
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[blob] = rng.uniform(0, 1, size=3)
    return np.clip(img, 0.02, 0.98)


def generate(
    out_dir: str | Path,
    n: int,
    kind: str = "shape_vs_texture",
    seed: int = 0,
    size: int = 64,
    n_styles: int = 16,
    start: int = 0,
    prefix: str = "img",
) -> DatasetManifest:
    """Write ``n`` PNGs plus ``manifest.csv`` and a ``styles/`` bank under ``out_dir``.

    Classes alternate image by image, so the set is balanced; consecutive
    images share a patient id (left and right eye).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if n < 4:
        raise ValueError("need at least 4 images")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    grade_rng = substream(seed, "synth", "grades", start)
    records = []
    for k in range(start, start + n):
        referable = k % 2 == 1
        grade = int(grade_rng.choice([2, 3, 4]) if referable else grade_rng.choice([0, 1]))
        image_id = f"{prefix}{k:06d}"
        rel = f"images/{image_id}.png"
        save_image(synth_image(seed, k, referable, size), out / rel)
        records.append(FundusRecord(image_id, str((out / rel).resolve()), grade, f"{prefix}p{k // 2:06d}",
                                    "OD" if k % 2 == 0 else "OS"))
    manifest = DatasetManifest(records)
    write_manifest_relative(manifest, out / "manifest.csv", out)
    if n_styles:
        (out / "styles").mkdir(exist_ok=True)
        for s in range(n_styles):
            save_image(synth_style(seed, s, size), out / "styles" / f"style{s:03d}.png")
    return manifest


def write_manifest_relative(manifest: DatasetManifest, path: Path, base: Path) -> None:
    """Write a manifest with image URIs relative to ``base`` so the folder is relocatable."""
    base = base.resolve()
    rel = [
        FundusRecord(r.image_id, str(Path(r.image_uri).resolve().relative_to(base)), r.grade, r.patient_id, r.eye)
        for r in manifest.records
    ]
    write_manifest(DatasetManifest(rel), path)
