"""Hyperparameter containers and JSON loading."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    n_e: int = 4
    r_e: float = 5.0
    theta_vote: int = 1
    tau: int = 1
    l_e: Optional[int] = None  # None: every layer
    seed: int = 0

    def __post_init__(self):
        if self.n_e < 1:
            raise ConfigError("ensemble.n_e must be >= 1")
        if self.r_e < 0:
            raise ConfigError("ensemble.r_e must be >= 0")
        if not 1 <= self.theta_vote <= self.n_e:
            raise ConfigError("ensemble.theta_vote must lie in [1, n_e]")
        if self.tau not in (0, 1):
            raise ConfigError("ensemble.tau must be 0 or 1")
        if self.l_e is not None and self.l_e < 0:
            raise ConfigError("ensemble.l_e must be >= 0")


@dataclass(frozen=True)
class HipConfig:
    """All tunables of the mask estimator, sparse kernel and decode loop."""

    k: int = 512
    b_q: int = 32
    b_k: int = 2
    top_r: Optional[int] = None
    sink_size: int = 32
    window_size: int = 128
    l_d: int = 3
    r_m: int = 8
    ensemble: Optional[EnsembleConfig] = None

    def __post_init__(self):
        if self.b_q < 1 or self.b_k < 1:
            raise ConfigError("b_q and b_k must be >= 1")
        if self.k < self.b_k:
            raise ConfigError(f"k={self.k} must be >= b_k={self.b_k}")
        if self.top_r is not None and self.top_r < 1:
            raise ConfigError("top_r must be >= 1")
        if self.sink_size < 0 or self.window_size < 0:
            raise ConfigError("sink_size and window_size must be >= 0")
        if self.l_d < 0:
            raise ConfigError("l_d must be >= 0")
        if self.r_m < 1:
            raise ConfigError("r_m must be >= 1")

    @property
    def n_nodes(self) -> int:
        return math.ceil(self.k / self.b_k)

    def replace(self, **changes) -> "HipConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_HIP_KEYS = {f.name for f in dataclasses.fields(HipConfig)}
_ENS_KEYS = {f.name for f in dataclasses.fields(EnsembleConfig)}


def _as_int(name, v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name} must be an integer, got {v!r}")
    return v


def config_from_dict(data: Mapping[str, Any], *, strict: bool = True) -> HipConfig:
    """Build a HipConfig from a mapping whose keys mirror the field names.

    With ``strict=False`` unrelated keys (sweep settings and the like) are
    ignored instead of rejected.
    """
    if not isinstance(data, Mapping):
        raise ConfigError("config must be a JSON object")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key not in _HIP_KEYS:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        if key == "ensemble":
            if value is None:
                kwargs[key] = None
                continue
            if not isinstance(value, Mapping):
                raise ConfigError("ensemble must be an object")
            bad = set(value) - _ENS_KEYS
            if bad:
                raise ConfigError(f"unknown ensemble keys {sorted(bad)}")
            ens = dict(value)
            for name in ("n_e", "theta_vote", "tau", "seed"):
                if name in ens:
                    _as_int(f"ensemble.{name}", ens[name])
            if ens.get("l_e") is not None:
                _as_int("ensemble.l_e", ens["l_e"])
            if "r_e" in ens and (isinstance(ens["r_e"], bool) or not isinstance(ens["r_e"], (int, float))):
                raise ConfigError("ensemble.r_e must be a number")
            kwargs[key] = EnsembleConfig(**ens)
        elif key == "top_r":
            kwargs[key] = None if value is None else _as_int(key, value)
        else:
            kwargs[key] = _as_int(key, value)
    return HipConfig(**kwargs)


def load_config(path) -> HipConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data, strict=False)
