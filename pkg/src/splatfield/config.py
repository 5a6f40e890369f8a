"""Aggregated pipeline configuration and the flat key-value config file.

The on-disk format is one `section.field = value` assignment per line, with
`#` comments; unknown keys are an error. Architecture-relevant fields feed a
stable hash used to reject incompatible checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

from .deformation import DecoderConfig, HexPlaneConfig, MLPEncoderConfig
from .objectives import LossWeights
from .rasterizer import RasterConfig
from .trainer import TrainConfig


@dataclass
class ModelConfig:
    sh_degree: int = 3
    deformation: str = "hexplane"  # or "mlp" (ablation baseline)

    def __post_init__(self):
        if self.deformation not in ("hexplane", "mlp"):
            raise ValueError(f"unknown deformation kind {self.deformation!r}")


@dataclass
class InitConfig:
    mode: str = "holistic"       # or "random" (ablation baseline)
    keep_fraction: float = 0.001
    opacity: float = 0.1
    random_count: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("holistic", "random"):
            raise ValueError(f"unknown init mode {self.mode!r}")


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    init: InitConfig = field(default_factory=InitConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    hexplane: HexPlaneConfig = field(default_factory=HexPlaneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    mlp: MLPEncoderConfig = field(default_factory=MLPEncoderConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)


def _coerce(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(type(current[0])(p) for p in parts)
    return raw


def apply_overrides(config: PipelineConfig, items: dict[str, str]) -> PipelineConfig:
    """Apply `section.field -> raw value` assignments, returning a new config."""
    sections: dict[str, dict] = {}
    for key, raw in items.items():
        if "." not in key:
            raise KeyError(f"config key {key!r} must look like section.field")
        section, name = key.split(".", 1)
        if not hasattr(config, section):
            raise KeyError(f"unknown config section {section!r}")
        sub = getattr(config, section)
        try:
            current = getattr(sub, name)
        except AttributeError:
            raise KeyError(f"unknown config key {key!r}") from None
        sections.setdefault(section, {})[name] = _coerce(raw, current)
    updates = {}
    for section, kv in sections.items():
        updates[section] = dataclasses.replace(getattr(config, section), **kv)
    return dataclasses.replace(config, **updates)


def parse_config_file(path, base: PipelineConfig | None = None) -> PipelineConfig:
    items = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            items[key.strip()] = raw
    return apply_overrides(base or PipelineConfig(), items)


def format_config(config: PipelineConfig) -> str:
    lines = []
    for section_field in fields(config):
        sub = getattr(config, section_field.name)
        for f in fields(sub):
            value = getattr(sub, f.name)
            if isinstance(value, tuple):
                value = " ".join(repr(v) for v in value)
            lines.append(f"{section_field.name}.{f.name} = {value}")
    return "\n".join(lines) + "\n"


# Fields that determine tensor shapes; a checkpoint only loads into a model
# built from a config that agrees on all of them.
_ARCHITECTURE_KEYS = (
    "model.sh_degree", "model.deformation",
    "hexplane.spatial_resolution", "hexplane.time_resolution",
    "hexplane.channels", "hexplane.levels", "hexplane.level_scale",
    "decoder.hidden_width", "decoder.use_trunk",
    "mlp.width", "mlp.depth", "mlp.out_dim", "mlp.freq_spatial", "mlp.freq_time",
)


def architecture_hash(config: PipelineConfig) -> int:
    parts = []
    for key in _ARCHITECTURE_KEYS:
        section, name = key.split(".")
        parts.append(f"{key}={getattr(getattr(config, section), name)!r}")
    digest = hashlib.sha256(";".join(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")
