"""Model configuration and the flat ``key = value`` config-file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np


@dataclass(frozen=True)
class ModelConfig:
    state_dim: int
    num_items: int
    max_timestep: int
    d_h: int = 32
    n_heads: int = 2
    n_layers: int = 3
    d_ff: Optional[int] = None
    dropout: float = 0.1
    ln_eps: float = 1e-5
    rtg_scale: float = 1.0
    # which same-timestep tokens of the other streams a cross-attention query
    # may see: "ordered" follows G -> s -> a, "mutual" lets all three see each other
    same_step: str = "ordered"
    prediction_range: int = 1

    def __post_init__(self):
        if min(self.state_dim, self.num_items, self.max_timestep, self.d_h,
               self.n_heads, self.n_layers) < 1:
            raise ValueError("model dimensions must all be >= 1")
        if self.d_h % self.n_heads:
            raise ValueError(f"d_h={self.d_h} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.same_step not in ("ordered", "mutual"):
            raise ValueError("same_step must be 'ordered' or 'mutual'")
        if self.prediction_range != 1:
            raise ValueError("only single-step action generation (prediction_range=1) is supported")
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_h)

    @property
    def head_dim(self) -> int:
        return self.d_h // self.n_heads

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"), str(path))


def format_kv(values: dict[str, Any]) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def coerce(value: str, kind):
    """Convert a config string to the python type of a dataclass field default."""
    text = value.strip()
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if text.lower() == "none":
        return None
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def build_dataclass(cls, values: dict[str, str], **fixed):
    """Instantiate ``cls`` from string values, rejecting unknown keys."""
    known = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    kwargs = dict(fixed)
    for key, raw in values.items():
        f = known[key]
        kind = _field_kind(f)
        try:
            kwargs[key] = coerce(raw, kind)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return cls(**kwargs)


def _field_kind(f: dataclasses.Field):
    ann = str(f.type)
    for name, kind in (("bool", bool), ("int", int), ("float", float)):
        if name in ann:
            return kind
    return str
