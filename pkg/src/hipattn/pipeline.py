"""End-to-end HiP attention: mask estimation, sink/window union, sparse kernel."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .config import HipConfig
from .ensemble import ensemble_block_mask
from .mask import BlockMask, OpCounters, estimate_block_mask
from .sparse import sparse_attention, union_effective_mask


def estimate_mask(
    Q: np.ndarray,
    K: np.ndarray,
    cfg: HipConfig,
    causal: bool = True,
    counters: Optional[OpCounters] = None,
    use_ensemble: bool = False,
) -> BlockMask:
    if use_ensemble:
        return ensemble_block_mask(Q, K, cfg, causal, counters)
    return estimate_block_mask(Q, K, cfg, causal, counters)


def hip_attention(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    cfg: HipConfig,
    causal: bool = True,
    counters: Optional[OpCounters] = None,
    use_ensemble: bool = False,
) -> np.ndarray:
    mask = estimate_mask(Q, K, cfg, causal, counters, use_ensemble)
    eff = union_effective_mask(mask, cfg.sink_size, cfg.window_size)
    return sparse_attention(Q, K, V, eff, counters)
