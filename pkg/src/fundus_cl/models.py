"""Encoder, projection head and classifier networks."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .rng import substream_seed

SMALL_STAGES = ((2, 16), (2, 32), (2, 64))
RESNET50_STAGES = ((3, 256), (4, 512), (6, 1024), (3, 2048))


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    family: str = "small_resnet"
    stages: tuple[tuple[int, int], ...] = SMALL_STAGES
    embedding_dim: int = 128
    input_size: int = 224

    def __post_init__(self):
        if self.family not in ("small_resnet", "resnet50_like"):
            raise ValueError(f"unknown encoder family {self.family!r}")
        stages = tuple((int(b), int(c)) for b, c in self.stages)
        if not stages or any(b < 1 or c < 1 for b, c in stages):
            raise ValueError("encoder needs at least one stage of positive size")
        object.__setattr__(self, "stages", stages)
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.input_size < 8:
            raise ValueError("input_size must be >= 8")

    @classmethod
    def paper_scale(cls) -> "EncoderConfig":
        return cls("resnet50_like", RESNET50_STAGES, 2048, 224)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        if "stages" in d:
            d["stages"] = tuple(tuple(s) for s in d["stages"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {**asdict(self), "stages": [list(s) for s in self.stages]}


@dataclass(frozen=True)
class ProjectionHeadConfig:
    hidden_dim: int = 128
    output_dim: int = 64

    def __post_init__(self):
        if self.hidden_dim < 2 or self.output_dim < 2:
            raise ValueError("projection dims must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def config_digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _norm(channels: int) -> nn.GroupNorm:
    # Per-sample normalisation keeps every forward pass a row-wise function of its input.
    return nn.GroupNorm(min(8, channels), channels)


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.norm1 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.norm2 = _norm(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), _norm(c_out))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Bottleneck(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        mid = max(1, c_out // 4)
        self.conv1 = nn.Conv2d(c_in, mid, 1, bias=False)
        self.norm1 = _norm(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride, 1, bias=False)
        self.norm2 = _norm(mid)
        self.conv3 = nn.Conv2d(mid, c_out, 1, bias=False)
        self.norm3 = _norm(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), _norm(c_out))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = F.relu(self.norm2(self.conv2(out)))
        out = self.norm3(self.conv3(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Encoder(nn.Module):
    """Residual CNN: stem, strided stages, global average pool, affine embedding."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        block = BasicBlock if cfg.family == "small_resnet" else Bottleneck
        stem_width = cfg.stages[0][1] if cfg.family == "small_resnet" else 64
        if cfg.family == "small_resnet":
            self.stem = nn.Sequential(nn.Conv2d(3, stem_width, 3, 1, 1, bias=False), _norm(stem_width), nn.ReLU())
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(3, stem_width, 7, 2, 3, bias=False), _norm(stem_width), nn.ReLU(),
                nn.MaxPool2d(3, 2, 1),
            )
        layers, c_in = [], stem_width
        for s, (n_blocks, width) in enumerate(cfg.stages):
            for b in range(n_blocks):
                layers.append(block(c_in, width, 2 if (s > 0 and b == 0) else 1))
                c_in = width
        self.stages = nn.Sequential(*layers)
        self.fc = nn.Linear(c_in, cfg.embedding_dim)

    def forward(self, x):
        x = self.stages(self.stem(x))
        return self.fc(x.mean(dim=(2, 3)))


class ProjectionHead(nn.Module):
    def __init__(self, embedding_dim: int, cfg: ProjectionHeadConfig):
        super().__init__()
        self.fc1 = nn.Linear(embedding_dim, cfg.hidden_dim)
        self.fc2 = nn.Linear(cfg.hidden_dim, cfg.output_dim)

    def forward(self, h):
        return self.fc2(F.relu(self.fc1(h)))


class ContrastiveModel(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig, head_cfg: ProjectionHeadConfig):
        super().__init__()
        self.encoder = Encoder(encoder_cfg)
        self.projection = ProjectionHead(encoder_cfg.embedding_dim, head_cfg)

    def forward(self, x):
        return self.projection(self.encoder(x))


class Classifier(nn.Module):
    """Encoder plus a single affine layer producing two-class logits."""

    def __init__(self, encoder_cfg: EncoderConfig):
        super().__init__()
        self.encoder = Encoder(encoder_cfg)
        self.head = nn.Linear(encoder_cfg.embedding_dim, 2)

    def forward(self, x):
        return self.head(self.encoder(x))

    def proba(self, x):
        return torch.softmax(self.forward(x), dim=1)


def init_weights(module: nn.Module, seed: int, *stream) -> None:
    """Seeded He-normal init for conv/linear weights, zero biases, unit norms."""
    gen = torch.Generator().manual_seed(substream_seed(seed, "init", *stream))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def to_tensor(images) -> torch.Tensor:
    """B x H x W x 3 numpy batch (or list of images) to a float32 NCHW tensor."""
    if isinstance(images, torch.Tensor):
        return images
    arr = np.stack(images) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32))


def _check_images(x: torch.Tensor, cfg: EncoderConfig) -> None:
    expected = (3, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected or x.shape[0] == 0:
        raise ShapeMismatchError(f"expected a non-empty batch of {expected} images, got {tuple(x.shape)}")


@torch.no_grad()
def encoder_forward(encoder: Encoder, images) -> np.ndarray:
    """Representations h for a batch of H x W x 3 images."""
    x = to_tensor(images)
    _check_images(x, encoder.cfg)
    return encoder(x).double().numpy()


@torch.no_grad()
def projection_forward(head: ProjectionHead, h) -> np.ndarray:
    h = torch.as_tensor(np.asarray(h), dtype=torch.float32)
    if h.ndim != 2 or h.shape[1] != head.fc1.in_features:
        raise ShapeMismatchError(f"expected h of width {head.fc1.in_features}, got {tuple(h.shape)}")
    return head(h).double().numpy()


def expected_shapes(module: nn.Module) -> dict[str, tuple[int, ...]]:
    return {k: tuple(v.shape) for k, v in module.state_dict().items()}


def named_tensors(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def load_named_tensors(module: nn.Module, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
    want = expected_shapes(module)
    problems = []
    for name, shape in want.items():
        if name not in tensors:
            if strict:
                problems.append(f"{name}: missing (expected {shape})")
        elif tuple(tensors[name].shape) != shape:
            problems.append(f"{name}: got {tuple(tensors[name].shape)}, expected {shape}")
    if strict:
        problems += [f"{name}: unexpected tensor" for name in tensors if name not in want]
    if problems:
        raise ShapeMismatchError("tensor/config mismatch:\n  " + "\n  ".join(problems))
    state = {k: torch.from_numpy(np.array(tensors[k], dtype=np.float32)) for k in want if k in tensors}
    module.load_state_dict(state, strict=strict)
