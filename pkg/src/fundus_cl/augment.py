"""Two-view augmentation: SimCLR-style transforms plus AdaIN style transfer."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .imaging import LUMA, load_image, resize

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class AugmentationPolicy:
    p_hflip: float = 0.5
    rotation_deg: tuple[float, float] = (-25.0, 25.0)
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    crop_scale: tuple[float, float] = (0.6, 1.0)
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    p_blur: float = 0.5
    p_nst: float = 0.7
    nst_alpha: float = 1.0
    epsilon: float = 1e-5
    output_size: int = 224

    def __post_init__(self):
        for name in ("p_hflip", "p_blur", "p_nst", "nst_alpha"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("rotation_deg", "crop_scale", "blur_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is not ordered: {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")
        if self.blur_sigma[0] < 0:
            raise ValueError("blur sigma must be non-negative")
        if min(self.brightness, self.contrast, self.saturation, self.epsilon) < 0:
            raise ValueError("jitter strengths and epsilon must be non-negative")
        if self.output_size < 8:
            raise ValueError("output_size must be >= 8")

    @classmethod
    def disabled(cls, output_size: int = 224) -> "AugmentationPolicy":
        """A policy whose regular transforms are all no-ops."""
        return cls(
            p_hflip=0.0, rotation_deg=(0.0, 0.0), brightness=0.0, contrast=0.0,
            saturation=0.0, crop_scale=(1.0, 1.0), p_blur=0.0, p_nst=0.0,
            output_size=output_size,
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class StyleBank:
    styles: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.styles)


def load_style_bank(directory: str | Path, size: int | None = None) -> StyleBank:
    """Every PNG/JPEG under ``directory`` (sorted by name), optionally resized square."""
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    styles = []
    for p in paths:
        img = load_image(p)
        styles.append(resize(img, size, size) if size else img)
    return StyleBank(styles)


class FeatureCodec(Protocol):
    """Maps an H x W x 3 image to a C x H' x W' feature map and back."""

    tolerance: float

    def encode(self, img: np.ndarray) -> np.ndarray: ...

    def decode(self, features: np.ndarray) -> np.ndarray: ...


class IdentityCodec:
    """Pixel space as feature space: AdaIN becomes per-channel colour-statistics transfer."""

    tolerance = 0.0

    def encode(self, img: np.ndarray) -> np.ndarray:
        return np.moveaxis(np.asarray(img, dtype=np.float64), -1, 0)

    def decode(self, features: np.ndarray) -> np.ndarray:
        return np.moveaxis(features, 0, -1)


def channel_stats(feature_map: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population standard deviation of a C x ... array."""
    flat = np.asarray(feature_map, dtype=np.float64).reshape(len(feature_map), -1)
    if flat.shape[1] == 0:
        raise ValueError("each channel needs at least one element")
    mu = flat.mean(axis=1)
    sigma = np.sqrt(np.mean((flat - mu[:, None]) ** 2, axis=1))
    return mu, sigma


def adain(content: np.ndarray, style: np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
    """Re-normalise each content channel to the style channel's mean and std."""
    content = np.asarray(content, dtype=np.float64)
    if len(content) != len(style):
        raise ValueError(f"channel mismatch: content {len(content)} vs style {len(style)}")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    mu_c, sd_c = channel_stats(content)
    mu_s, sd_s = channel_stats(style)
    extra = (1,) * (content.ndim - 1)
    mu_c, sd_c = mu_c.reshape(-1, *extra), sd_c.reshape(-1, *extra)
    mu_s, sd_s = mu_s.reshape(-1, *extra), sd_s.reshape(-1, *extra)
    denom = sd_c + epsilon
    # A constant channel with epsilon 0 has nothing to rescale; map it to the style mean.
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, sd_s * (content - mu_c) / safe, 0.0) + mu_s


def nst_augment(
    img: np.ndarray,
    style: np.ndarray,
    alpha: float = 1.0,
    codec: FeatureCodec | None = None,
    epsilon: float = 1e-5,
    clamp: bool = True,
) -> np.ndarray:
    """Style-transfer ``img`` toward ``style``; ``alpha`` blends with the original features."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    codec = codec or IdentityCodec()
    f_img = codec.encode(img)
    f_style = codec.encode(style)
    if f_img.shape[0] != f_style.shape[0]:
        raise ValueError("codec produced mismatched channel counts")
    if alpha == 0.0:
        mixed = f_img
    else:
        mixed = alpha * adain(f_img, f_style, epsilon) + (1.0 - alpha) * f_img
    out = codec.decode(mixed)
    if out.shape != np.shape(img):
        raise ValueError(f"codec decode shape {out.shape} != input shape {np.shape(img)}")
    return np.clip(out, 0.0, 1.0) if clamp else out


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def random_crop_resize(img, scale_range, out_size, rng) -> np.ndarray:
    h, w = img.shape[:2]
    scale = rng.uniform(*scale_range)
    ch = min(h, max(1, int(round(h * np.sqrt(scale)))))
    cw = min(w, max(1, int(round(w * np.sqrt(scale)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return resize(img[top:top + ch, left:left + cw], out_size, out_size)


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0.0:
        return img
    return ndimage.rotate(img, degrees, axes=(1, 0), reshape=False, order=1, mode="reflect")


def color_jitter(img, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Multiplicative brightness, contrast about the mean luminance, saturation about grey."""
    out = np.clip(img * brightness, 0.0, 1.0)
    mean = float((out @ LUMA).mean())
    out = np.clip((out - mean) * contrast + mean, 0.0, 1.0)
    grey = (out @ LUMA)[..., None]
    return np.clip((out - grey) * saturation + grey, 0.0, 1.0)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect", truncate=3.0)


def apply_regular(img: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Crop-resize, flip, rotate, colour-jitter and blur, in that order.

    Every random variate is drawn unconditionally so the stream position
    never depends on which branches fire.
    """
    out = random_crop_resize(img, policy.crop_scale, policy.output_size, rng)
    flip = rng.random() < policy.p_hflip
    angle = rng.uniform(*policy.rotation_deg)
    b = rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness)
    c = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast)
    s = rng.uniform(1.0 - policy.saturation, 1.0 + policy.saturation)
    blur = rng.random() < policy.p_blur
    sigma = rng.uniform(*policy.blur_sigma)

    if flip:
        out = hflip(out)
    out = rotate(out, angle)
    if (b, c, s) != (1.0, 1.0, 1.0):
        out = color_jitter(out, b, c, s)
    if blur and sigma > 0:
        out = gaussian_blur(out, sigma)
    return np.clip(out, 0.0, 1.0)


def augment_view(img, policy, style_bank, rng, codec=None) -> np.ndarray:
    use_nst = rng.random() < policy.p_nst
    style_idx = int(rng.integers(len(style_bank))) if len(style_bank) else 0
    if use_nst:
        img = nst_augment(img, style_bank.styles[style_idx], policy.nst_alpha, codec, policy.epsilon)
    return apply_regular(img, policy, rng)


def make_view_pair(
    img: np.ndarray,
    policy: AugmentationPolicy,
    style_bank: StyleBank | None,
    rng: np.random.Generator,
    codec: FeatureCodec | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views of one image."""
    bank = style_bank if style_bank is not None else StyleBank()
    if policy.p_nst > 0 and not len(bank):
        raise ValueError("style bank is empty but p_nst > 0")
    x_i = augment_view(img, policy, bank, rng, codec)
    x_j = augment_view(img, policy, bank, rng, codec)
    return x_i, x_j


def style_preview(images: Sequence[np.ndarray], bank: StyleBank, policy, rng, codec=None):
    """(original, stylised) pairs for visual inspection."""
    if not len(bank):
        raise ValueError("style bank is empty")
    pairs = []
    for img in images:
        style = bank.styles[int(rng.integers(len(bank)))]
        pairs.append((img, nst_augment(img, style, policy.nst_alpha, codec, policy.epsilon)))
    return pairs
