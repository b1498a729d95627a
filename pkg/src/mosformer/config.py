"""Run configuration: typed dataclasses plus a small key-value text format.

The text format is UTF-8, one ``key = value`` per line, ``#`` comments.
Keys are dotted paths into :class:`RunConfig` (``model.neighbors``,
``optim.lr_max``, ``model.encoder.stage_channels``). A ``[section]`` line
prefixes the keys that follow it. Tuples are written space- or
comma-separated; booleans as ``true``/``false``.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Tuple, Union

from .encoders import ENCODER_MODES, EncoderConfig
from .exceptions import ConfigError
from .model import ModelConfig


@dataclass(frozen=True)
class OptimConfig:
    lr_max: float = 3e-2
    lr_min: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 24
    warmup_epochs: int = 5
    # 0 means one pass over all training slices per epoch
    iters_per_epoch: int = 0
    seed: int = 0
    dtype: str = "float32"
    # 0 keeps the native in-plane size
    image_size: int = 0
    flip: bool = False


@dataclass(frozen=True)
class PathsConfig:
    data: str = ""
    out: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        validate(self)


def validate(cfg: RunConfig) -> None:
    o, t, m = cfg.optim, cfg.train, cfg.model
    if not 0 < o.lr_min <= o.lr_max:
        raise ConfigError("optim: need 0 < lr_min <= lr_max")
    if not 0 <= o.momentum < 1:
        raise ConfigError("optim.momentum must lie in [0, 1)")
    if o.weight_decay < 0:
        raise ConfigError("optim.weight_decay must be nonnegative")
    if t.epochs < 1 or t.batch_size < 1 or t.iters_per_epoch < 0:
        raise ConfigError("train: epochs and batch_size must be positive, iters_per_epoch nonnegative")
    if not 0 <= t.warmup_epochs < t.epochs:
        raise ConfigError("train.warmup_epochs must lie in [0, epochs)")
    if t.dtype not in ("float32", "float64"):
        raise ConfigError("train.dtype must be float32 or float64")
    if t.image_size and t.image_size % 16:
        raise ConfigError("train.image_size must be a multiple of 16")
    if m.encoder_mode not in ENCODER_MODES:
        raise ConfigError(f"model.encoder_mode must be one of {ENCODER_MODES}")
    if not 0 <= m.momentum < 1:
        raise ConfigError("model.momentum must lie in [0, 1)")


def desk_preset() -> RunConfig:
    """Small model and schedule that trains on 64×64 phantoms in minutes on one core."""
    return RunConfig(
        model=ModelConfig(window_size=4),
        train=TrainConfig(epochs=40, batch_size=4, warmup_epochs=5, iters_per_epoch=30),
    )


def paper_preset() -> RunConfig:
    """Full-size layout: ResNet-50 encoder, 224×224 inputs, 300 epochs, batch 24."""
    return RunConfig(
        model=ModelConfig(n_classes=9, window_size=7, encoder=EncoderConfig.resnet50()),
        train=TrainConfig(image_size=224),
    )


PRESETS = {"desk": desk_preset, "paper": paper_preset}


# ------------------------------------------------------------------ parsing
def parse_text(text: str) -> Dict[str, str]:
    """Flatten the key-value text into ``{dotted.key: raw value}``."""
    out: Dict[str, str] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        full = f"{section}.{key}" if section else key
        if full in out:
            raise ConfigError(f"line {lineno}: duplicate key {full!r}")
        out[full] = value
    return out


def _convert(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin in (tuple, Tuple):
            (inner, *_) = typing.get_args(tp)
            parts = [p for p in raw.replace(",", " ").split() if p]
            if not parts:
                raise ValueError("empty tuple")
            return tuple(_convert(p, inner, key) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from exc
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _apply(obj, entries: Dict[str, str], prefix: str):
    hints = typing.get_type_hints(type(obj))
    changes: Dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        key = f"{prefix}{f.name}"
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            sub = {k: v for k, v in entries.items() if k.startswith(key + ".")}
            if sub:
                changes[f.name] = _apply(getattr(obj, f.name), sub, key + ".")
            if key in entries:
                raise ConfigError(f"{key} is a section, not a value")
        elif key in entries:
            changes[f.name] = _convert(entries[key], tp, key)
    try:
        return replace(obj, **changes) if changes else obj
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def known_keys(obj=None, prefix: str = "") -> list:
    obj = RunConfig() if obj is None else obj
    hints = typing.get_type_hints(type(obj))
    keys = []
    for f in dataclasses.fields(obj):
        if dataclasses.is_dataclass(hints[f.name]):
            keys.extend(known_keys(getattr(obj, f.name), f"{prefix}{f.name}."))
        else:
            keys.append(f"{prefix}{f.name}")
    return keys


def from_text(text: str, base: Union[RunConfig, str, None] = None) -> RunConfig:
    """Parse config text on top of ``base`` (a RunConfig or preset name; default: full-size defaults)."""
    if isinstance(base, str):
        if base not in PRESETS:
            raise ConfigError(f"unknown preset {base!r}")
        base = PRESETS[base]()
    base = RunConfig() if base is None else base
    entries = parse_text(text)
    unknown = sorted(set(entries) - set(known_keys(base)))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return _apply(base, entries, "")


def load(path: Union[str, Path], base: Union[RunConfig, str, None] = None) -> RunConfig:
    return from_text(Path(path).read_text(encoding="utf-8"), base)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_text(cfg: RunConfig) -> str:
    """Serialise every field; ``from_text(to_text(c)) == c``."""
    lines = []

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                walk(value, f"{prefix}{f.name}.")
            else:
                lines.append(f"{prefix}{f.name} = {_format(value)}")

    walk(cfg, "")
    return "\n".join(lines) + "\n"
