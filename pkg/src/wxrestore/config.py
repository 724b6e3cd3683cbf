"""Model, training and data configuration plus the flat ``key = value`` run file."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from wxrestore.errors import ConfigError

DEGRADATION_KINDS = ("rain_streak", "raindrop", "haze", "snow", "mixed")
LOSSES = ("charbonnier", "charbonnier+ssim")


@dataclass(frozen=True)
class NetworkConfig:
    stages: int = 4
    base_channels: int = 16
    query_len: int = 48
    head_count: int = 2
    task_channels: int = 32
    ffn_expansion: int = 2
    tsg_window: int = 8
    ffc_global_ratio: float = 0.5
    ffc_bottleneck_only: bool = False
    input_channels: int = 3

    @property
    def mixup_count(self) -> int:
        return self.stages

    def stage_channels(self, i: int) -> int:
        """Trunk width after encoder stage ``i`` (0-based)."""
        return self.base_channels * 2 ** (i + 1)

    def validate(self) -> "NetworkConfig":
        bad = []
        for name in ("base_channels", "query_len", "head_count", "task_channels",
                     "ffn_expansion", "tsg_window"):
            if getattr(self, name) < 1:
                bad.append(f"{name}={getattr(self, name)} must be >= 1")
        if self.stages < 3:
            bad.append(f"stages={self.stages} must be >= 3 (task query fuses T_1..T_3)")
        if self.input_channels != 3:
            bad.append(f"input_channels={self.input_channels} must be 3")
        if not 0.0 <= self.ffc_global_ratio <= 1.0:
            bad.append(f"ffc_global_ratio={self.ffc_global_ratio} must lie in [0, 1]")
        if self.head_count >= 1:
            if self.base_channels % self.head_count:
                bad.append(f"base_channels={self.base_channels} not divisible by "
                           f"head_count={self.head_count}")
            if self.task_channels % self.head_count:
                bad.append(f"task_channels={self.task_channels} not divisible by "
                           f"head_count={self.head_count}")
        if 0.0 < self.ffc_global_ratio < 1.0 and self.base_channels >= 1:
            widths = [self.base_channels] + [self.stage_channels(i) for i in range(self.stages)]
            for c in widths:
                g = round(c * self.ffc_global_ratio)
                if g == 0 or g == c:
                    bad.append(f"ffc_global_ratio={self.ffc_global_ratio} leaves an empty "
                               f"branch at {c} channels")
                    break
        if bad:
            raise ConfigError("invalid NetworkConfig: " + "; ".join(bad))
        return self

    def config_hash(self) -> str:
        text = _section_text("model", self)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-4
    min_lr_ratio: float = 0.01
    seed: int = 0
    loss: str = "charbonnier"
    charbonnier_eps: float = 1e-3
    ssim_weight: float = 0.2
    grad_clip: float = 1.0
    augment: bool = True
    checkpoint_every: int = 0
    eval_every: int = 0

    def validate(self) -> "TrainConfig":
        bad = []
        if self.steps < 1:
            bad.append(f"steps={self.steps} must be >= 1")
        if self.batch_size < 1:
            bad.append(f"batch_size={self.batch_size} must be >= 1")
        if not self.lr > 0:
            bad.append(f"lr={self.lr} must be > 0")
        if self.loss not in LOSSES:
            bad.append(f"loss={self.loss!r} not one of {LOSSES}")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            bad.append("checkpoint_every/eval_every must be >= 0")
        if bad:
            raise ConfigError("invalid TrainConfig: " + "; ".join(bad))
        return self


@dataclass(frozen=True)
class DataConfig:
    size: int = 64
    kinds: tuple[str, ...] = ("mixed",)
    density: float = 1.0
    intensity: float = 0.8
    angle_deg: float = 10.0
    atmospheric_light: float = 0.8
    transmission: float = 0.7
    jitter: bool = True

    def validate(self) -> "DataConfig":
        bad = []
        if self.size < 8:
            bad.append(f"size={self.size} must be >= 8")
        if not self.kinds:
            bad.append("kinds must not be empty")
        for k in self.kinds:
            if k not in DEGRADATION_KINDS:
                bad.append(f"kind {k!r} not one of {DEGRADATION_KINDS}")
        if self.density < 0:
            bad.append("density must be >= 0")
        if not 0 <= self.intensity <= 1:
            bad.append("intensity must lie in [0, 1]")
        if not 0 <= self.atmospheric_light <= 1:
            bad.append("atmospheric_light must lie in [0, 1]")
        if not 0 < self.transmission <= 1:
            bad.append("transmission must lie in (0, 1]")
        if bad:
            raise ConfigError("invalid DataConfig: " + "; ".join(bad))
        return self


@dataclass(frozen=True)
class RunConfig:
    model: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.data.validate()
        return self


_SECTIONS = {"model": NetworkConfig, "train": TrainConfig, "data": DataConfig}


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(value)
    return str(value)


def _parse_value(raw: str, kind: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in (str, "str"):
            return raw
        if str(kind).startswith("tuple"):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported field type for {key}")


def _section_text(name: str, obj: Any) -> str:
    lines = [f"[{name}]"]
    for f in fields(obj):
        lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def serialize(cfg: RunConfig) -> str:
    return "\n".join(_section_text(name, getattr(cfg, name)) for name in _SECTIONS)


def parse(text: str) -> RunConfig:
    """Parse a run file. Missing keys take defaults; unknown keys and sections raise."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    unknown = [f"[{s}]" for s in parser.sections() if s not in _SECTIONS]
    parts = {}
    for name, cls in _SECTIONS.items():
        kwargs = {}
        known = {f.name: f.type for f in fields(cls)}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in known:
                    unknown.append(f"{name}.{key}")
                    continue
                kwargs[key] = _parse_value(raw, known[key], f"{name}.{key}")
        parts[name] = kwargs
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    return RunConfig(**{name: _SECTIONS[name](**kw) for name, kw in parts.items()})


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse(Path(path).read_text())


def dump(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(serialize(cfg))


def network_config_from_items(items: dict[str, str]) -> NetworkConfig:
    """Rebuild a NetworkConfig from the string pairs stored in a checkpoint manifest."""
    buf = io.StringIO()
    buf.write("[model]\n")
    for k, v in items.items():
        buf.write(f"{k} = {v}\n")
    return parse(buf.getvalue()).model


def network_config_items(cfg: NetworkConfig) -> dict[str, str]:
    return {f.name: _format_value(getattr(cfg, f.name)) for f in fields(cfg)}
