from __future__ import annotations

import os
import typing
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import dacite
import yaml

from ..api import ConfigError, CropSpec, GeometryError, GridSpec
from .log import FAIL, LOG
from .util import is_false, is_true

FloatPair = Tuple[float, float]

NORM_KINDS = ("layer-norm", "batch-norm")
TARGET_TYPES = ("feature", "pixel")
LR_SCHEDULES = ("cosine", "constant")
DTYPES = ("float32", "float64")

# Bare keys accepted on the command line for geometry inspection.
KEY_ALIASES = {
    "crop_a": "geometry.crop_a",
    "crop_b": "geometry.crop_b",
    "grid": "geometry.grid",
    "loss.lambda": "loss.lam",
}


def _check(condition: bool, key: str, description: str):
    if not condition:
        raise ConfigError(key, description)


def _probability(value: float, key: str):
    _check(0.0 <= value <= 1.0, key, f"probability {value} outside [0, 1]")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    backbone_dim: int = 96
    backbone_depth: int = 4
    backbone_heads: int = 4
    embed_dim: int = 64
    heads: int = 4
    projector_depth: int = 2
    decoder_depth: int = 4
    mlp_ratio: float = 4.0
    norm_kind: str = "batch-norm"
    dtype: str = "float32"
    init_seed: int = 0

    def __post_init__(self):
        _check(self.patch_size > 0, "model.patch_size", "must be positive")
        _check(
            self.image_size > 0 and self.image_size % self.patch_size == 0,
            "model.image_size",
            f"{self.image_size} is not divisible by patch size {self.patch_size}",
        )
        for key, dim, heads in (
            ("model.backbone_heads", self.backbone_dim, self.backbone_heads),
            ("model.heads", self.embed_dim, self.heads),
        ):
            _check(heads > 0 and dim % heads == 0, key, f"{heads} heads do not divide {dim}")
        for key, dim in (
            ("model.backbone_dim", self.backbone_dim),
            ("model.embed_dim", self.embed_dim),
        ):
            _check(dim % 4 == 0, key, f"{dim} is not divisible by 4")
        _check(self.norm_kind in NORM_KINDS, "model.norm_kind", f"expected one of {NORM_KINDS}")
        _check(self.dtype in DTYPES, "model.dtype", f"expected one of {DTYPES}")
        _check(self.projector_depth >= 1, "model.projector_depth", "must be at least 1")
        _check(self.decoder_depth >= 1, "model.decoder_depth", "must be at least 1")

    @property
    def grid(self) -> GridSpec:
        side = self.image_size // self.patch_size
        return GridSpec(side, side)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: FloatPair = (0.2, 1.0)
    aspect_ratio: FloatPair = (3.0 / 4.0, 4.0 / 3.0)
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: FloatPair = (1.0, 0.1)
    solarize_prob: FloatPair = (0.0, 0.2)
    blur_sigma: FloatPair = (0.1, 2.0)
    solarize_threshold: float = 0.5
    flip_prob: float = 0.5
    use_color_aug: bool = True
    mask_ratio: float = 0.75

    def __post_init__(self):
        low, high = self.crop_scale
        _check(0.0 < low <= high <= 1.0, "augment.crop_scale", "must lie within (0, 1]")
        _check(
            0.0 < self.aspect_ratio[0] <= self.aspect_ratio[1],
            "augment.aspect_ratio",
            "must be a positive ascending range",
        )
        _check(0.0 <= self.hue <= 0.5, "augment.hue", "must lie within [0, 0.5]")
        for name in ("jitter_prob", "grayscale_prob", "flip_prob"):
            _probability(getattr(self, name), f"augment.{name}")
        for name in ("blur_prob", "solarize_prob"):
            for value in getattr(self, name):
                _probability(value, f"augment.{name}")
        _check(
            0.0 < self.blur_sigma[0] <= self.blur_sigma[1],
            "augment.blur_sigma",
            "must be a positive ascending range",
        )
        _check(0.0 < self.mask_ratio < 1.0, "augment.mask_ratio", "must lie within (0, 1)")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    alpha_global: float = 0.0
    alpha_dense: float = 1.0
    de_center_dense: bool = True
    eps: float = 1e-8

    def __post_init__(self):
        _check(self.lam >= 0.0, "loss.lambda", "must be non-negative")
        _check(
            self.alpha_global >= 0.0 and self.alpha_dense >= 0.0,
            "loss.alpha_global",
            "loss weights must be non-negative",
        )
        _check(
            self.alpha_global + self.alpha_dense > 0.0,
            "loss.alpha_dense",
            "at least one of the global and dense weights must be positive",
        )


@dataclass(frozen=True)
class EmaSchedule:
    base_momentum: float = 0.99
    final_momentum: float = 1.0
    # 0 means the whole training run.
    total_steps: int = 0

    def __post_init__(self):
        _check(
            0.0 < self.base_momentum <= self.final_momentum <= 1.0,
            "ema.base_momentum",
            "requires 0 < base <= final <= 1",
        )
        _check(self.total_steps >= 0, "ema.total_steps", "must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1.5e-4
    batch_size: int = 64
    weight_decay: float = 0.05
    betas: FloatPair = (0.9, 0.95)
    adam_eps: float = 1e-8
    warmup_epochs: int = 5
    total_epochs: int = 100
    lr_schedule: str = "cosine"
    clip_grad: float = 0.0
    seed: int = 0
    same_view: bool = False
    target_type: str = "feature"
    checkpoint_every: int = 10
    log_every: int = 10
    collapse_threshold: float = 1e-3

    def __post_init__(self):
        _check(self.batch_size >= 2, "train.batch_size", "must be at least 2")
        _check(self.total_epochs >= 1, "train.total_epochs", "must be at least 1")
        _check(
            0 <= self.warmup_epochs < self.total_epochs,
            "train.warmup_epochs",
            "must be below train.total_epochs",
        )
        _check(self.base_lr > 0.0, "train.base_lr", "must be positive")
        _check(self.weight_decay >= 0.0, "train.weight_decay", "must be non-negative")
        _check(
            all(0.0 <= b < 1.0 for b in self.betas), "train.betas", "must lie within [0, 1)"
        )
        _check(self.lr_schedule in LR_SCHEDULES, "train.lr_schedule", f"one of {LR_SCHEDULES}")
        _check(self.target_type in TARGET_TYPES, "train.target_type", f"one of {TARGET_TYPES}")
        _check(self.clip_grad >= 0.0, "train.clip_grad", "must be non-negative")
        _check(self.checkpoint_every >= 1, "train.checkpoint_every", "must be at least 1")
        _check(self.log_every >= 1, "train.log_every", "must be at least 1")


@dataclass(frozen=True)
class EvalConfig:
    knn_k: int = 20
    knn_temperature: float = 0.07
    probe_epochs: int = 200
    probe_lr: float = 0.5
    probe_weight_decay: float = 0.0
    probe_feature_norm: bool = True
    batch_size: int = 128

    def __post_init__(self):
        _check(self.knn_k >= 1, "eval.knn_k", "must be at least 1")
        _check(self.knn_temperature > 0.0, "eval.knn_temperature", "must be positive")
        _check(self.probe_epochs >= 1, "eval.probe_epochs", "must be at least 1")
        _check(self.probe_lr > 0.0, "eval.probe_lr", "must be positive")
        _check(self.batch_size >= 1, "eval.batch_size", "must be at least 1")


@dataclass(frozen=True)
class DataConfig:
    train_dir: str = "data/train"
    test_dir: str = "data/test"
    synthetic_classes: int = 4
    synthetic_train: int = 2000
    synthetic_test: int = 500
    synthetic_size: int = 32
    synthetic_seed: int = 0

    def __post_init__(self):
        _check(
            2 <= self.synthetic_classes <= 6,
            "data.synthetic_classes",
            "the shapes generator supports 2 to 6 classes",
        )
        _check(self.synthetic_size >= 8, "data.synthetic_size", "must be at least 8 pixels")


@dataclass(frozen=True)
class GeometryConfig:
    log_base: float = 10.0
    crop_a: Tuple[float, ...] = (0.0, 0.0, 100.0, 100.0)
    crop_b: Tuple[float, ...] = (0.0, 0.0, 100.0, 100.0)
    grid: Tuple[int, ...] = (14,)

    def __post_init__(self):
        _check(self.log_base > 0.0 and self.log_base != 1.0, "geometry.log_base", "invalid base")
        for key in ("crop_a", "crop_b"):
            _check(
                len(getattr(self, key)) == 4,
                f"geometry.{key}",
                "expected top,left,height,width",
            )
            try:
                CropSpec(*getattr(self, key))
            except GeometryError as ex:
                raise ConfigError(f"geometry.{key}", str(ex))
        _check(len(self.grid) in (1, 2), "geometry.grid", "expected n or n_h,n_w")
        _check(min(self.grid) >= 1, "geometry.grid", "token counts must be positive")


@dataclass(frozen=True)
class SimConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ema: EmaSchedule = field(default_factory=EmaSchedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)


@dataclass(frozen=True)
class RuntimeSettings:
    threads: int
    log_level: int
    queue_size: int


def optenv(var: str) -> Optional[str]:
    val = os.getenv(var)

    LOG.debug("Configuration environment lookup: %r => %r", var, val)

    return val


def env(var: str, default: Optional[str] = None) -> str:
    val = optenv(var)

    if val:
        return val
    elif default is not None:
        LOG.debug(
            "Using default %r for unspecified configuration environment variable: %r",
            default,
            var,
        )
        return default
    else:
        FAIL(f"Missing required environment variable: {var}")
        return ""  # unreached


def envint(var: str, default: Optional[int] = None) -> int:
    val = env(var, None if default is None else str(default))

    try:
        return int(val)
    except ValueError:
        FAIL(f"Invalid integer {val} in environment variable: {var}")


def get_runtime_settings() -> RuntimeSettings:
    settings = RuntimeSettings(
        threads=max(1, envint("SIM_THREADS", os.cpu_count() or 1)),
        log_level=envint("SIM_LOG_LEVEL", 0),
        queue_size=max(1, envint("SIM_QUEUE_SIZE", 4)),
    )

    LOG.info("Runtime settings: %r", asdict(settings))

    return settings


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """
    Parse flat ``key = value`` text. Blank lines and ``#`` comments are
    ignored; later keys override earlier ones.
    """
    values = {}  # type: Dict[str, str]

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue

        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}", f"expected key = value, got {raw!r}")

        values[key.strip()] = value.strip()

    return values


def parse_overrides(overrides: Sequence[str]) -> Dict[str, str]:
    values = {}  # type: Dict[str, str]

    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(item, "override must have the form key=value")
        values[key.strip()] = value.strip()

    return values


_SECTIONS = {f.name: f for f in fields(SimConfig)}


def _coerce(key: str, text: str, hint: Any) -> Any:
    try:
        if hint is bool:
            if is_true(text):
                return True
            if is_false(text):
                return False
            raise ValueError(f"not a boolean: {text!r}")

        if hint in (int, float, str):
            return hint(text)

        if typing.get_origin(hint) is tuple:
            args = typing.get_args(hint)
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(args[0](p) for p in parts)
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(t(p) for t, p in zip(args, parts))

    except ValueError as ex:
        raise ConfigError(key, str(ex))

    raise ConfigError(key, f"unsupported value type {hint!r}")


def build_config(flat: Mapping[str, str]) -> SimConfig:
    """
    Build a validated configuration from flat dotted keys. Every value is
    coerced to the type of the field it names; unknown keys are rejected.
    """
    nested = {}  # type: Dict[str, Dict[str, Any]]

    for raw_key, text in flat.items():
        key = KEY_ALIASES.get(raw_key, raw_key)
        section, _, name = key.partition(".")

        if section not in _SECTIONS or not name:
            raise ConfigError(raw_key, "unknown configuration key")

        hints = typing.get_type_hints(_SECTIONS[section].default_factory)  # type: ignore
        if name not in hints:
            raise ConfigError(raw_key, "unknown configuration key")

        nested.setdefault(section, {})[name] = _coerce(raw_key, text, hints[name])

    try:
        return dacite.from_dict(SimConfig, nested, config=dacite.Config(strict=True))
    except dacite.DaciteError as ex:
        raise ConfigError("config", str(ex))


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def config_to_flat(config: SimConfig) -> Dict[str, str]:
    flat = {}  # type: Dict[str, str]
    for section, values in asdict(config).items():
        for name, value in values.items():
            flat[f"{section}.{name}"] = _format_value(value)
    return flat


def config_echo(config: SimConfig) -> str:
    """
    Flat text rendering of the effective configuration; parses back into an
    equal configuration.
    """
    return "".join(f"{k} = {v}\n" for k, v in config_to_flat(config).items())


def load_presets() -> Dict[str, Dict[str, Dict[str, Any]]]:
    text = resources.files(__package__).joinpath("presets.yaml").read_text()
    return yaml.safe_load(text)


def _preset_values(kind: str, name: str) -> Dict[str, str]:
    table = load_presets().get(kind, {})

    if name not in table:
        raise ConfigError(kind[:-1], f"unknown {kind[:-1]} {name!r} (valid: {sorted(table)})")

    return {k: _format_value(v) for k, v in table[name]["set"].items()}


def load_config(
    path: Optional[Path] = None,
    overrides: Sequence[str] = (),
    profile: Optional[str] = None,
    preset: Optional[str] = None,
) -> SimConfig:
    """
    Layer, in increasing precedence: a named profile, the config file, a
    named ablation preset and the command-line overrides.
    """
    flat = {}  # type: Dict[str, str]

    if profile is not None:
        flat.update(_preset_values("profiles", profile))

    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as ex:
            raise ConfigError(str(path), f"cannot read config file: {ex}")
        flat.update(parse_config_text(text, str(path)))

    if preset is not None:
        flat.update(_preset_values("presets", preset))

    flat.update(parse_overrides(overrides))

    config = build_config(flat)

    LOG.info("Configuration:\n%s", config_echo(config))

    return config
