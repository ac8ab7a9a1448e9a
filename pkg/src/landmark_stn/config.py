"""Line-oriented ``key = value`` configuration files.

Every :class:`ModelConfig` and :class:`TrainConfig` field is addressable by
its name. Blank lines and ``#`` comments are ignored. ``lambda`` is accepted
as an alias for ``lam``.
"""

from __future__ import annotations

import typing
from dataclasses import MISSING, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig

ALIASES = {"lambda": "lam", "M": "recurrent_steps", "J": "num_landmarks"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: (hints[f.name], f.default if f.default is not MISSING else None) for f in fields(cls)}


MODEL_KEYS = _field_types(ModelConfig)
TRAIN_KEYS = _field_types(TrainConfig)


def coerce(key: str, raw: str, typ, default):
    """Convert ``raw`` to the type of field ``key``; raises :class:`ConfigError`."""
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is tuple or isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typing.get_origin(typ) is typing.Union:  # Optional[str]
            return None if raw.lower() in ("", "none") else raw
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_text(text: str, source: str = "<config>") -> dict:
    """Raw ``{key: value-string}`` with aliases resolved; later lines win."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = ALIASES.get(key, key)
        if key not in MODEL_KEYS and key not in TRAIN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build_configs(raw: dict, overrides: Optional[dict] = None) -> tuple[ModelConfig, TrainConfig]:
    """Typed configs from raw strings; ``overrides`` (already typed) take precedence."""
    model_kw, train_kw = {}, {}
    for key, value in raw.items():
        key = ALIASES.get(key, key)
        if key in MODEL_KEYS:
            model_kw[key] = coerce(key, value, *MODEL_KEYS[key])
        elif key in TRAIN_KEYS:
            train_kw[key] = coerce(key, value, *TRAIN_KEYS[key])
        else:
            raise ConfigError(f"unknown key {key!r}")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        key = ALIASES.get(key, key)
        if key in MODEL_KEYS:
            model_kw[key] = value
        elif key in TRAIN_KEYS:
            train_kw[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}")
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: Optional[dict] = None) -> tuple[ModelConfig, TrainConfig]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return build_configs(parse_text(text, str(p)), overrides)


def dump_config(cfg: ModelConfig, tcfg: Optional[TrainConfig] = None) -> str:
    lines = []
    for obj in (cfg, tcfg):
        if obj is None:
            continue
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
