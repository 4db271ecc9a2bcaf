"""Block-sparse attention over an estimated mask plus sink and window tokens."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .mask import BlockMask, OpCounters
from .oracle import EmptyMaskWarning, TokenMask, query_positions, visible_lengths


@dataclass
class EffectiveMask:
    """Sorted token indices per query row, tiled by ``b_q x b_k`` for the kernel."""

    rows: TokenMask
    b_q: int
    b_k: int
    n_keys: int

    @property
    def n_queries(self) -> int:
        return len(self.rows)

    @classmethod
    def from_tokens(cls, rows: TokenMask, b_q: int = 1, b_k: int = 1, n_keys: Optional[int] = None) -> "EffectiveMask":
        rows = [np.unique(np.asarray(r, dtype=np.int64)) for r in rows]
        if n_keys is None:
            n_keys = max((int(r[-1]) + 1 for r in rows if r.size), default=1)
        return cls(rows, b_q, b_k, n_keys)


def union_effective_mask(
    mask: BlockMask, sink_size: int, window_size: int, T: Optional[int] = None, causal: Optional[bool] = None
) -> EffectiveMask:
    """Expanded ``mask`` tokens plus sink ``[0, sink)`` plus window ``(pos - window, pos]``."""
    if sink_size < 0 or window_size < 0:
        raise ValueError("sink_size and window_size must be >= 0")
    n_keys = mask.n_keys if T is None else T
    causal = mask.causal if causal is None else causal
    if n_keys != mask.n_keys:
        mask = mask.with_keys(n_keys)
    expanded = mask.to_token_mask()
    vis = visible_lengths(mask.n_queries, n_keys, causal)
    pos = query_positions(mask.n_queries, n_keys)
    rows: TokenMask = []
    for i, tokens in enumerate(expanded):
        bound = int(vis[i])
        sink = np.arange(min(sink_size, bound))
        lo = max(int(pos[i]) - window_size + 1, 0)
        hi = min(int(pos[i]) + 1, bound)
        window = np.arange(lo, hi) if window_size > 0 else np.empty(0, dtype=np.int64)
        rows.append(np.union1d(np.union1d(tokens, sink), window).astype(np.int64))
    return EffectiveMask(rows, mask.b_q, mask.b_k, n_keys)


def tile_read_bound(cfg_k: int, b_q: int, b_k: int, sink_size: int, window_size: int) -> int:
    """Upper bound on key tiles touched by one query block.

    A block of ``b_q`` rows spreads its window over ``window + b_q - 1``
    tokens; with ``b_q == 1`` this is ``k/b_k + ceil(w/b_k) + ceil(s/b_k) + 2``.
    """
    return (
        math.ceil(cfg_k / b_k)
        + math.ceil((window_size + b_q - 1) / b_k)
        + math.ceil(sink_size / b_k)
        + 2
    )


def sparse_attention(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    eff: EffectiveMask,
    counters: Optional[OpCounters] = None,
    *,
    reverse_tiles: bool = False,
    tiles_per_step: int = 16,
) -> np.ndarray:
    """Online-softmax attention restricted to ``eff``.

    Each query block walks the union of key tiles its rows select, keeping a
    running max, denominator and weighted sum per row. Scores outside a
    row's selection inside a touched tile are masked to ``-inf``.
    """
    T_q, d = Q.shape
    T_k = K.shape[0]
    if K.shape[1] != d or V.shape[0] != T_k:
        raise ValueError("Q, K, V shapes are inconsistent")
    if len(eff.rows) != T_q:
        raise ValueError(f"mask has {len(eff.rows)} rows, Q has {T_q}")
    b_q, b_k = eff.b_q, eff.b_k
    scale = 1.0 / np.sqrt(d)
    Vf = V.astype(np.float64)
    out = np.zeros((T_q, V.shape[1]), dtype=np.float64)
    n_empty = 0
    for start in range(0, T_q, b_q):
        stop = min(start + b_q, T_q)
        row_tokens = eff.rows[start:stop]
        for i, t in enumerate(row_tokens):
            if t.size and (t[0] < 0 or t[-1] >= T_k):
                raise IndexError(f"row {start + i}: token index out of range [0, {T_k})")
        flat = np.concatenate(row_tokens) if row_tokens else np.empty(0, dtype=np.int64)
        tiles = np.unique(flat // b_k)
        if counters is not None:
            counters.key_block_reads += int(tiles.size)
        if tiles.size == 0:
            n_empty += stop - start
            continue
        if reverse_tiles:
            tiles = tiles[::-1]
        # selection matrix over the concatenated tile columns
        rank = np.full(-(-T_k // b_k), -1, dtype=np.int64)
        rank[tiles] = np.arange(tiles.size)
        sel = np.zeros((stop - start, tiles.size * b_k), dtype=bool)
        for i, t in enumerate(row_tokens):
            sel[i, rank[t // b_k] * b_k + t % b_k] = True
        Qb = Q[start:stop].astype(np.float64)
        run_max = np.full(stop - start, -np.inf)
        run_den = np.zeros(stop - start)
        acc = np.zeros((stop - start, V.shape[1]))
        for c0 in range(0, tiles.size, tiles_per_step):
            chunk = tiles[c0 : c0 + tiles_per_step]
            keys = (chunk[:, None] * b_k + np.arange(b_k)).ravel()
            valid = keys < T_k
            keys_c = np.minimum(keys, T_k - 1)
            s = (Qb @ K[keys_c].astype(np.float64).T) * scale
            m = sel[:, c0 * b_k : c0 * b_k + keys.size] & valid
            s = np.where(m, s, -np.inf)
            new_max = np.maximum(run_max, s.max(axis=1))
            safe = np.where(np.isfinite(new_max), new_max, 0.0)
            alpha = np.where(np.isfinite(run_max), np.exp(run_max - safe), 0.0)
            p = np.where(m, np.exp(s - safe[:, None]), 0.0)
            run_den = run_den * alpha + p.sum(axis=1)
            acc = acc * alpha[:, None] + p @ Vf[keys_c]
            run_max = new_max
        good = run_den > 0
        n_empty += int((~good).sum())
        out[start:stop][good] = acc[good] / run_den[good, None]
    if n_empty:
        warnings.warn(
            f"{n_empty} query row(s) have an empty mask; returning zeros", EmptyMaskWarning, stacklevel=2
        )
    return out.astype(np.float32)

