"""TOML run configuration with strict keys and a canonical serialised form."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .augment import AugmentationPolicy
from .finetune import FinetuneConfig, TrainParams
from .imaging import QualityThresholds
from .models import SMALL_STAGES, EncoderConfig, ProjectionHeadConfig, config_digest
from .pretrain import PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    manifest: str = ""
    unlabeled_manifest: str = ""
    test_manifest: str = ""
    splits_csv: str = ""
    style_dir: str = ""
    input_size: int = 224
    load_size: int = 0
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1


@dataclass
class QualitySection:
    min_luminance: float = 0.05
    min_sharpness: float = 1e-4
    max_clipped: float = 0.6


@dataclass
class AugmentSection:
    p_hflip: float = 0.5
    rotation_deg: list = field(default_factory=lambda: [-25.0, 25.0])
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    crop_scale: list = field(default_factory=lambda: [0.6, 1.0])
    blur_sigma: list = field(default_factory=lambda: [0.1, 2.0])
    p_blur: float = 0.5
    p_nst: float = 0.7
    nst_alpha: float = 1.0
    epsilon: float = 1e-5


@dataclass
class PretrainSection:
    encoder_family: str = "small_resnet"
    encoder_stages: list = field(default_factory=lambda: [list(s) for s in SMALL_STAGES])
    embedding_dim: int = 128
    projection_hidden_dim: int = 128
    projection_output_dim: int = 64
    batch_size: int = 64
    temperature: float = 0.5
    max_epochs: int = 100
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    saturation_patience: int = 10
    saturation_delta: float = 1e-3
    probe_batches: int = 4


@dataclass
class FinetuneSection:
    lr_grid: list = field(default_factory=lambda: [1e-6, 1e-5, 1e-4, 1e-3, 1e-2])
    optimizer_grid: list = field(default_factory=lambda: ["adam", "sgd"])
    batch_grid: list = field(default_factory=lambda: [32, 64, 128, 256])
    epochs: int = 30
    folds: int = 5
    label_fraction: float = 1.0
    freeze_encoder: bool = False


@dataclass
class EvalSection:
    bootstrap_resamples: int = 2000


@dataclass
class SweepSection:
    fractions: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 11)])
    inits: list = field(default_factory=lambda: ["cl", "random"])
    seeds: int = 5
    batch_sizes: list = field(default_factory=lambda: [32, 64, 128, 256, 512, 1024, 2048, 4096])
    batch_label_fraction: float = 1.0
    research_per_fraction: bool = False
    nst_label_fraction: float = 1.0


SECTIONS = {
    "data": DataSection,
    "quality": QualitySection,
    "augment": AugmentSection,
    "pretrain": PretrainSection,
    "finetune": FinetuneSection,
    "eval": EvalSection,
    "sweep": SweepSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    quality: QualitySection = field(default_factory=QualitySection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    # -- typed views used by the pipeline ------------------------------------

    def encoder_config(self) -> EncoderConfig:
        p = self.pretrain
        return EncoderConfig(p.encoder_family, tuple(tuple(s) for s in p.encoder_stages),
                             p.embedding_dim, self.data.input_size)

    def head_config(self) -> ProjectionHeadConfig:
        return ProjectionHeadConfig(self.pretrain.projection_hidden_dim, self.pretrain.projection_output_dim)

    def pretrain_config(self, **overrides) -> PretrainConfig:
        p = self.pretrain
        kw = dict(batch_size=p.batch_size, temperature=p.temperature, max_epochs=p.max_epochs,
                  optimizer=p.optimizer, learning_rate=p.learning_rate,
                  saturation_patience=p.saturation_patience, saturation_delta=p.saturation_delta,
                  probe_batches=p.probe_batches, seed=self.seed)
        kw.update(overrides)
        return PretrainConfig(**kw)

    def policy(self, **overrides) -> AugmentationPolicy:
        kw = dataclasses.asdict(self.augment)
        for k in ("rotation_deg", "crop_scale", "blur_sigma"):
            kw[k] = tuple(kw[k])
        kw.update(output_size=self.data.input_size, **overrides)
        return AugmentationPolicy(**kw)

    def finetune_config(self, init: str = "contrastive_checkpoint", fraction: float | None = None) -> FinetuneConfig:
        f = self.finetune
        return FinetuneConfig(
            init=init, lr_grid=tuple(f.lr_grid), optimizer_grid=tuple(f.optimizer_grid),
            batch_grid=tuple(f.batch_grid), epochs=f.epochs, folds=f.folds,
            label_fraction=f.label_fraction if fraction is None else fraction,
            freeze_encoder=f.freeze_encoder, seed=self.seed,
        )

    def single_grid_point(self) -> TrainParams | None:
        """The fixed hyperparameters when the configured grid has exactly one point."""
        grid = self.finetune_config().grid()
        return grid[0] if len(grid) == 1 else None

    def thresholds(self) -> QualityThresholds:
        q = self.quality
        return QualityThresholds(q.min_luminance, q.min_sharpness, q.max_clipped)

    # -- serialisation ---------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical(self) -> str:
        return tomli_w.dumps(_sorted(self.to_dict()))

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def validate(self) -> "RunConfig":
        """Build every typed view once so bad values surface as ConfigError."""
        try:
            self.encoder_config()
            self.head_config()
            self.pretrain_config()
            self.policy()
            self.finetune_config()
            self.thresholds()
            fr = (self.data.split_train, self.data.split_val, self.data.split_test)
            if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
                raise ValueError("data split fractions must be non-negative and sum to 1")
            if self.sweep.seeds < 1 or not self.sweep.fractions or not self.sweep.inits:
                raise ValueError("sweep needs seeds >= 1 and non-empty fractions and inits")
            if any(i not in ("cl", "random") for i in self.sweep.inits):
                raise ValueError("sweep inits must be 'cl' or 'random'")
            if self.eval.bootstrap_resamples < 100:
                raise ValueError("bootstrap_resamples must be >= 100")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _sorted(d):
    if isinstance(d, dict):
        return {k: _sorted(d[k]) for k in sorted(d)}
    return d


def _coerce(value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and not isinstance(value, int):
        raise TypeError(f"expected an integer, got {value!r}")
    if isinstance(default, str) and not isinstance(value, str):
        raise TypeError(f"expected a string, got {value!r}")
    if isinstance(default, list):
        if not isinstance(value, list):
            raise TypeError(f"expected a list, got {value!r}")
        if default and all(isinstance(x, float) for x in default):
            return [float(x) for x in value]
    return value


def from_dict(doc: dict) -> RunConfig:
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = RunConfig()
    if "seed" in doc:
        if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
            raise ConfigError("seed must be an integer")
        cfg.seed = doc["seed"]
    for name, cls in SECTIONS.items():
        raw = doc.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"[{name}] must be a table")
        section = getattr(cfg, name)
        known = {f.name for f in fields(cls)}
        bad = set(raw) - known
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        for key, value in raw.items():
            try:
                setattr(section, key, _coerce(value, getattr(section, key)))
            except TypeError as exc:
                raise ConfigError(f"[{name}].{key}: {exc}") from exc
    return cfg.validate()


def parse(text: str) -> RunConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return from_dict(doc)


def load(path: str | Path | None) -> RunConfig:
    """Parse a config file; relative data paths resolve against the file's folder."""
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    cfg = parse(path.read_text())
    base = path.resolve().parent
    for key in ("manifest", "unlabeled_manifest", "test_manifest", "splits_csv", "style_dir"):
        value = getattr(cfg.data, key)
        if value and not Path(value).is_absolute():
            setattr(cfg.data, key, str((base / value).resolve()))
    return cfg
