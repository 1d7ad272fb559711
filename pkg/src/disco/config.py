"""Dataclass configuration plus the flat `section.key = value` file format.

The config file is line-oriented text: one `key = value` pair per line,
`#` comments, keys prefixed with their section (`model.`, `optim.`,
`data.`, `data.rds.`, `data.augment.`, `run.`). Lists are comma-separated;
per-stage lists of lists use `;` between stages. Chosen for diff-ability
and zero parser dependencies.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError

DECODER_SCALES = (16, 8, 4, 2, 1)  # spatial divisor of each decoder output


@dataclass
class ModelConfig:
    """Every architectural hyperparameter of the network."""

    in_channels: int = 1
    base_width: int = 16  # feature channels at 1/2 scale; 1/4 scale uses 2x
    res_blocks_half: int = 4
    res_blocks_quarter: int = 8
    growth: int = 8
    max_disparity: int = 16  # correlation levels at 1/4 scale
    encoder_width: int = 32  # entry-conv output width of each encoder stage
    encoder_layers: int = 4
    encoder_dilations: tuple = ((1, 3, 6, 8), (1, 3, 6, 8), (1, 3, 6, 8))
    decoder_widths: tuple = (32, 32, 32, 16, 16)
    decoder_layers: int = 2
    lgcf_growth: int = 8
    lgcf_dilations: tuple = (1, 3, 6, 12, 18, 24)
    lgcf_pool_kernels: tuple = (8, 16, 32, 64)
    refine_width: int = 16
    refine_feat_channels: int = 8  # 1x1-compressed feature width fed to refinement
    head_scale: float = 8.0  # constant gain after each disparity head
    use_dilations: bool = True
    use_lgcf: bool = True
    use_refinement: bool = True
    precision: str = "float32"
    init_seed: int = 0

    def __post_init__(self):
        self.encoder_dilations = tuple(tuple(s) for s in self.encoder_dilations)
        self.decoder_widths = tuple(self.decoder_widths)
        self.lgcf_dilations = tuple(self.lgcf_dilations)
        self.lgcf_pool_kernels = tuple(self.lgcf_pool_kernels)
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.max_disparity < 1:
            raise ConfigError("max_disparity must be >= 1")
        if len(self.encoder_dilations) != 3:
            raise ConfigError("encoder_dilations needs one schedule per encoder stage (3)")
        for sched in self.encoder_dilations:
            if len(sched) != self.encoder_layers:
                raise ConfigError(
                    f"encoder dilation schedule {sched} length != encoder_layers "
                    f"{self.encoder_layers}"
                )
        if len(self.decoder_widths) != len(DECODER_SCALES):
            raise ConfigError("decoder_widths needs one width per decoder scale (5)")
        if list(DECODER_SCALES) != sorted(DECODER_SCALES, reverse=True) or DECODER_SCALES[-1] != 1:
            raise ConfigError("decoder scales must increase to full resolution")

    @property
    def quarter_channels(self) -> int:
        return 2 * self.base_width

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class OptimConfig:
    """Adaptive-moment optimizer settings with stepwise learning-rate decay."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 0.5
    decay_boundaries: tuple = ()  # iteration indices; empty = thirds of the budget

    def __post_init__(self):
        self.decay_boundaries = tuple(self.decay_boundaries)
        if not (0 < self.lr):
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")

    def boundaries_for(self, total_iterations: int) -> tuple:
        if self.decay_boundaries:
            return self.decay_boundaries
        if total_iterations < 3:
            return ()
        return (total_iterations // 3, 2 * total_iterations // 3)

    def lr_at(self, iteration: int, total_iterations: int) -> float:
        passed = sum(1 for b in self.boundaries_for(total_iterations) if iteration >= b)
        return self.lr * self.decay_factor**passed


@dataclass
class RdsConfig:
    """Procedural random-dot stereo generator settings."""

    height: int = 64
    width: int = 128
    channels: int = 1
    dot_density: float = 1.0  # fraction of pixels carrying nonzero intensity
    layout: str = "layered"  # constant | layered | ramp | mixed
    max_disparity: float = 12.0  # full-resolution pixels
    constant_disparity: float = 4.0
    min_layers: int = 2
    max_layers: int = 3
    mask_occlusions: bool = True

    def __post_init__(self):
        if not (0 < self.dot_density <= 1):
            raise ConfigError(f"dot_density must be in (0, 1], got {self.dot_density}")
        if self.layout not in ("constant", "layered", "ramp", "mixed"):
            raise ConfigError(f"unknown disparity layout {self.layout!r}")
        if self.channels not in (1, 3):
            raise ConfigError("rds channels must be 1 or 3")
        if not (self.max_disparity >= 0) or self.max_disparity >= self.width / 4:
            raise ConfigError(
                f"max_disparity {self.max_disparity} must stay below width/4 "
                f"= {self.width / 4} to keep matching well-posed"
            )
        if self.constant_disparity < 0 or self.constant_disparity > self.max_disparity:
            raise ConfigError("constant_disparity must lie in [0, max_disparity]")


@dataclass
class AugmentConfig:
    """Photometric + crop augmentation; identical parameters for both views."""

    enabled: bool = False
    crop_height: int = 0  # 0 disables cropping
    crop_width: int = 0
    brightness_lo: float = 0.8
    brightness_hi: float = 1.2
    gamma_lo: float = 0.8
    gamma_hi: float = 1.2
    color_lo: float = 0.9
    color_hi: float = 1.1

    def __post_init__(self):
        for lo, hi, name in (
            (self.brightness_lo, self.brightness_hi, "brightness"),
            (self.gamma_lo, self.gamma_hi, "gamma"),
            (self.color_lo, self.color_hi, "color"),
        ):
            if lo <= 0 or hi < lo:
                raise ConfigError(f"bad {name} range [{lo}, {hi}]")


@dataclass
class DataConfig:
    source: str = "rds"  # rds | manifest
    manifest_path: str = ""
    sample_count: int = 200  # 0 = unlimited stream (rds source only)
    holdout_count: int = 16
    batch_size: int = 4
    seed: int = 0
    rds: RdsConfig = field(default_factory=RdsConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.source not in ("rds", "manifest"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "manifest" and not self.manifest_path:
            raise ConfigError("manifest source requires data.manifest_path")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.sample_count < 0 or self.holdout_count < 0:
            raise ConfigError("sample/holdout counts must be >= 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    iterations: int = 1000
    checkpoint_every: int = 0  # 0 = only final/best
    eval_every: int = 200
    log_every: int = 10
    out_dir: str = "runs/out"
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")


# -- flat text round-trip ------------------------------------------------------

_SECTIONS = {
    "model": (ModelConfig, ("model",)),
    "optim": (OptimConfig, ("optim",)),
    "data": (DataConfig, ("data",)),
    "data.rds": (RdsConfig, ("data", "rds")),
    "data.augment": (AugmentConfig, ("data", "augment")),
    "run": (RunConfig, ()),
}


def _parse_value(text: str, ftype):
    text = text.strip()
    origin = typing.get_origin(ftype)
    if ftype is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {text!r}")
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    if ftype is str:
        return text
    if ftype is tuple or origin is tuple:
        if not text:
            return ()
        if ";" in text:
            return tuple(
                tuple(int(v) for v in part.split(",") if v.strip())
                for part in text.split(";")
            )
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if any(("." in p or "e" in p.lower()) for p in parts):
            return tuple(float(p) for p in parts)
        return tuple(int(p) for p in parts)
    raise ConfigError(f"unsupported config field type {ftype}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(",".join(str(v) for v in part) for part in value)
        return ",".join(str(v) for v in value)
    return str(value)


def _scalar_fields(cls):
    hints = typing.get_type_hints(cls)
    nested = (ModelConfig, OptimConfig, DataConfig, RdsConfig, AugmentConfig)
    return {f.name: hints[f.name] for f in fields(cls) if hints[f.name] not in nested}


def parse_config_text(text: str) -> RunConfig:
    """Parse the flat key=value format into a RunConfig."""
    values: dict = {name: {} for name in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        section, _, fname = key.rpartition(".")
        section = section or "run"
        if section not in _SECTIONS:
            raise ConfigError(f"config line {lineno}: unknown section {section!r}")
        cls, _ = _SECTIONS[section]
        ftypes = _scalar_fields(cls)
        if fname not in ftypes:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[section][fname] = _parse_value(val, ftypes[fname])
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"config line {lineno}: bad value for {key!r}: {exc}") from exc

    rds = RdsConfig(**values["data.rds"])
    augment = AugmentConfig(**values["data.augment"])
    data = DataConfig(rds=rds, augment=augment, **values["data"])
    model = ModelConfig(**values["model"])
    optim = OptimConfig(**values["optim"])
    return RunConfig(model=model, optim=optim, data=data, **values["run"])


def format_config_text(cfg: RunConfig) -> str:
    """Serialize a RunConfig back to the flat key=value format."""
    lines = []
    for section in ("run", "model", "optim", "data", "data.rds", "data.augment"):
        cls, path = _SECTIONS[section]
        obj = cfg
        for attr in path:
            obj = getattr(obj, attr)
        prefix = "" if section == "run" else section + "."
        for fname in _scalar_fields(cls):
            lines.append(f"{prefix}{fname} = {_format_value(getattr(obj, fname))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def save_config(path: str, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config_text(cfg))


def config_to_dict(cfg: ModelConfig) -> dict:
    """ModelConfig as a JSON-safe dict (checkpoint embedding)."""
    out = {}
    for f in fields(ModelConfig):
        v = getattr(cfg, f.name)
        out[f.name] = list(map(list, v)) if isinstance(v, tuple) and v and isinstance(v[0], tuple) else (
            list(v) if isinstance(v, tuple) else v
        )
    return out


def model_config_from_dict(d: dict) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name in d:
            v = d[f.name]
            if isinstance(v, list):
                v = tuple(tuple(i) if isinstance(i, list) else i for i in v)
            kwargs[f.name] = v
    return ModelConfig(**kwargs)


def scaled_tiny_config(**overrides) -> ModelConfig:
    """The desk-scale reference model (base width 16, growth 8, 16 levels)."""
    return replace(ModelConfig(), **overrides)
