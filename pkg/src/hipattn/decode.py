"""Autoregressive decoding over a synthetic attention stack with mask caching.

Each layer computes ``x + attention(x W_q, K_cache, V_cache)``. The first
``l_d`` layers attend densely; the rest estimate a HiP mask for the newest
query on step 1 and whenever the generated length is a multiple of ``r_m``,
and reuse the cached mask otherwise. Sink and window tokens are re-derived
every step because the window follows the current position.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .config import ConfigError, HipConfig
from .mask import BlockMask, OpCounters
from .oracle import dense_attention
from .pipeline import estimate_mask
from .sparse import sparse_attention, union_effective_mask
from .tensors import as_tensor, gen_random


@dataclass(frozen=True)
class SyntheticModel:
    L: int
    d: int
    seed: int
    layers: Tuple[Tuple[np.ndarray, np.ndarray, np.ndarray], ...]
    residual: bool = True


def _layer_seed(seed: int, layer: int, which: int) -> int:
    return int(np.random.SeedSequence([seed, layer, which]).generate_state(1)[0])


def new_synthetic_model(L: int, d: int, seed: int, residual: bool = True) -> SyntheticModel:
    if L < 1 or d < 1:
        raise ValueError("L and d must be >= 1")
    scale = np.float32(1.0 / np.sqrt(d))
    layers = tuple(
        tuple(gen_random(d, d, _layer_seed(seed, l, w)) * scale for w in range(3)) for l in range(L)
    )
    return SyntheticModel(L, d, seed, layers, residual)


@dataclass
class TraceRecord:
    step: int
    layer: int
    kind: str
    refreshed: bool
    cache_len: int
    mask_age: int
    counters: dict
    output: np.ndarray = field(repr=False)

    def to_json(self) -> dict:
        return {
            "step": self.step, "layer": self.layer, "kind": self.kind, "refreshed": self.refreshed,
            "cache_len": self.cache_len, "mask_age": self.mask_age, **self.counters,
        }


@dataclass
class DecodeTrace:
    records: List[TraceRecord]
    layer_counters: List[OpCounters]
    prompt_len: int
    n_steps: int

    def outputs(self, step: int) -> np.ndarray:
        """Hidden vector(s) leaving the last layer at ``step`` (0 is the prompt)."""
        return [r for r in self.records if r.step == step][-1].output

    def refresh_steps(self, layer: int) -> List[int]:
        return [r.step for r in self.records if r.layer == layer and r.step > 0 and r.refreshed]

    def decode_estimations(self, layer: int) -> int:
        return len(self.refresh_steps(layer))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in self.records)


def should_refresh(step: int, r_m: int) -> bool:
    return step == 1 or step % r_m == 0


def layer_kind(layer: int, cfg: HipConfig) -> str:
    if layer < cfg.l_d:
        return "dense"
    ens = cfg.ensemble
    if ens is not None and (ens.l_e is None or layer < ens.l_e):
        return "ensemble"
    return "hip"


def _rms_normalise(x: np.ndarray) -> np.ndarray:
    rms = float(np.sqrt(np.mean(x.astype(np.float64) ** 2)))
    return (x / rms).astype(np.float32) if rms > 0 else x


class _LayerState:
    def __init__(self, capacity: int, d: int):
        self.K = np.zeros((capacity, d), dtype=np.float32)
        self.V = np.zeros((capacity, d), dtype=np.float32)
        self.length = 0
        self.mask: Optional[BlockMask] = None
        self.age = 0

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        n = k.shape[0]
        self.K[self.length : self.length + n] = k
        self.V[self.length : self.length + n] = v
        self.length += n


def decode_run(model: SyntheticModel, prompt: np.ndarray, n_steps: int, cfg: HipConfig) -> DecodeTrace:
    if cfg.l_d > model.L:
        raise ConfigError(f"l_d={cfg.l_d} exceeds the model's {model.L} layers")
    prompt = as_tensor(prompt)
    if prompt.shape[0] < 1 or prompt.shape[1] != model.d:
        raise ValueError(f"prompt must be T x {model.d} with T >= 1")
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    T0 = prompt.shape[0]
    states = [_LayerState(T0 + n_steps, model.d) for _ in range(model.L)]
    counters = [OpCounters() for _ in range(model.L)]
    records: List[TraceRecord] = []

    x = prompt
    for step in range(n_steps + 1):
        for l, (Wq, Wk, Wv) in enumerate(model.layers):
            st, ctr = states[l], counters[l]
            before = ctr.copy()
            q, k, v = x @ Wq, x @ Wk, x @ Wv
            st.append(k, v)
            K, V = st.K[: st.length], st.V[: st.length]
            kind = layer_kind(l, cfg)
            refreshed = False
            if kind == "dense":
                a = dense_attention(q, K, V, causal=True)
            else:
                if step == 0 or should_refresh(step, cfg.r_m):
                    mask = estimate_mask(q, K, cfg, True, ctr, use_ensemble=kind == "ensemble")
                    refreshed = True
                    if step > 0:
                        st.mask, st.age = mask, 0
                else:
                    st.age += 1
                    mask = st.mask.with_keys(st.length)
                eff = union_effective_mask(mask, cfg.sink_size, cfg.window_size)
                a = sparse_attention(q, K, V, eff, ctr)
            x = (x + a) if model.residual else a
            records.append(TraceRecord(step, l, kind, refreshed, st.length, st.age, ctr.delta(before), x.copy()))
        x = _rms_normalise(x[-1:])
    return DecodeTrace(records, counters, T0, n_steps)
