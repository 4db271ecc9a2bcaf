"""Hierarchical block-mask estimation.

For every query block the visible key blocks are cut into ``n_nodes``
contiguous ranges. Each iteration halves every range, scores each half by
its first key block (max of the ``b_q x b_k`` score tile) and keeps the
``n_nodes`` best halves. After ``ceil(log2(B))`` rounds, ``B`` being the
number of visible key blocks, the first block of every surviving range
forms the mask row.

Rounding is half-up throughout; every tie in selection goes to the smaller
index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .config import HipConfig
from .oracle import TokenMask, query_positions, visible_lengths

Range = Tuple[int, int]
# (query_block, iteration, n_nodes) -> integer split offsets, one per node
SplitOffsets = Callable[[int, int, int], np.ndarray]


@dataclass
class OpCounters:
    score_evaluations: int = 0
    key_component_reads: int = 0
    key_block_reads: int = 0
    mask_estimations: int = 0

    def __iadd__(self, other: "OpCounters") -> "OpCounters":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def copy(self) -> "OpCounters":
        return OpCounters(**self.as_dict())

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def delta(self, before: "OpCounters") -> dict:
        return {k: v - getattr(before, k) for k, v in self.as_dict().items()}


@dataclass(frozen=True)
class NodeSet:
    """Ranges alive for one query block after ``iteration`` rounds (0 = initial)."""

    query_block: int
    iteration: int
    ranges: Tuple[Range, ...]
    scores: Optional[Tuple[float, ...]] = None
    bound: int = 0


@dataclass
class BlockMask:
    """Selected key-block indices for each query block."""

    rows: List[np.ndarray]
    b_q: int
    b_k: int
    n_queries: int
    n_keys: int
    causal: bool = False

    @property
    def n_query_blocks(self) -> int:
        return len(self.rows)

    def query_rows(self, qb: int) -> range:
        return range(qb * self.b_q, min((qb + 1) * self.b_q, self.n_queries))

    def visible_blocks(self, qb: int) -> int:
        return visible_key_blocks(qb, self.b_q, self.b_k, self.n_queries, self.n_keys, self.causal)

    def to_token_mask(self) -> TokenMask:
        vis = visible_lengths(self.n_queries, self.n_keys, self.causal)
        offs = np.arange(self.b_k)
        out: TokenMask = []
        for qb, blocks in enumerate(self.rows):
            tokens = (np.asarray(blocks, dtype=np.int64)[:, None] * self.b_k + offs).ravel()
            tokens = tokens[tokens < self.n_keys]
            for i in self.query_rows(qb):
                out.append(tokens[tokens < vis[i]])
        return out

    def with_keys(self, n_keys: int) -> "BlockMask":
        """Same selection, re-anchored to a longer key sequence (decode reuse)."""
        return BlockMask([r.copy() for r in self.rows], self.b_q, self.b_k, self.n_queries, n_keys, self.causal)

    def validate(self, max_blocks: Optional[int] = None) -> None:
        if len(self.rows) != math.ceil(self.n_queries / self.b_q):
            raise ValueError("row count does not match the number of query blocks")
        for qb, r in enumerate(self.rows):
            r = np.asarray(r)
            if r.size and (np.any(np.diff(r) <= 0) or r[0] < 0):
                raise ValueError(f"query block {qb}: indices not sorted and unique")
            if r.size and r[-1] >= self.visible_blocks(qb):
                raise ValueError(f"query block {qb}: block {r[-1]} beyond causal bound")
            if max_blocks is not None and r.size > max_blocks:
                raise ValueError(f"query block {qb}: {r.size} blocks exceed budget {max_blocks}")

    def to_text(self) -> str:
        lines = [f"{qb}: " + ",".join(str(int(b)) for b in r) for qb, r in enumerate(self.rows)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, b_q: int, b_k: int, n_queries: int, n_keys: int, causal: bool = False) -> "BlockMask":
        rows: List[np.ndarray] = []
        for line in text.splitlines():
            if not line.strip():
                continue
            head, _, tail = line.partition(":")
            if int(head) != len(rows):
                raise ValueError(f"expected query block {len(rows)}, got {head.strip()}")
            tail = tail.strip()
            rows.append(np.array([int(x) for x in tail.split(",")] if tail else [], dtype=np.int64))
        return cls(rows, b_q, b_k, n_queries, n_keys, causal)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BlockMask):
            return NotImplemented
        return (
            (self.b_q, self.b_k, self.n_queries, self.n_keys, self.causal)
            == (other.b_q, other.b_k, other.n_queries, other.n_keys, other.causal)
            and len(self.rows) == len(other.rows)
            and all(np.array_equal(a, b) for a, b in zip(self.rows, other.rows))
        )


def visible_key_blocks(qb: int, b_q: int, b_k: int, n_queries: int, n_keys: int, causal: bool) -> int:
    """Key blocks a query block may select; the causal edge block is included."""
    total = -(-n_keys // b_k)
    if not causal:
        return total
    last_row = min((qb + 1) * b_q, n_queries) - 1
    last_pos = int(query_positions(n_queries, n_keys)[last_row])
    return min(total, last_pos // b_k + 1)


def effective_block_sizes(cfg: HipConfig, n_queries: int, n_keys: int) -> Tuple[int, int]:
    return min(cfg.b_q, n_queries), min(cfg.b_k, n_keys)


def initial_nodes(n_blocks: int, n_nodes: int) -> List[Range]:
    """Partition ``[0, n_blocks)`` into ``n_nodes`` near-equal ranges."""
    if n_blocks < n_nodes:
        raise ValueError("fewer blocks than nodes")
    # round(j*B/n) with half-up rounding, in exact integer arithmetic
    bounds = [(2 * j * n_blocks + n_nodes) // (2 * n_nodes) for j in range(n_nodes + 1)]
    return [(bounds[j], bounds[j + 1] - 1) for j in range(n_nodes)]


def split_node(rng: Range, offset: int = 0) -> Tuple[Range, ...]:
    """Halve a range at ``round((f + l) / 2)``; single blocks pass through.

    ``offset`` shifts the split point, clamped so both halves stay non-empty.
    """
    f, l = rng
    if f > l:
        raise ValueError(f"empty range {rng}")
    if f == l:
        return (rng,)
    m = min(max((f + l + 1) // 2 + offset, f + 1), l)
    return (f, m - 1), (m, l)


def top_r_select(Qblock: np.ndarray, r: int) -> np.ndarray:
    """Components with the largest ``max_rows |q|``, returned in ascending order."""
    d = Qblock.shape[-1]
    if not 1 <= r <= d:
        raise ValueError(f"r={r} outside [1, {d}]")
    prominence = np.abs(np.asarray(Qblock, dtype=np.float64)).reshape(-1, d).max(axis=0)
    return np.sort(np.argsort(-prominence, kind="stable")[:r])


def _tile_scores(
    Qb: np.ndarray, K: np.ndarray, reps: np.ndarray, b_k: int, cols: Optional[np.ndarray]
) -> Tuple[np.ndarray, int]:
    """Max score of each representative tile and the number of key rows touched."""
    n_keys = K.shape[0]
    key_rows = reps[:, None] * b_k + np.arange(b_k)
    n_touched = int(np.count_nonzero(key_rows < n_keys))
    # a ragged final block repeats its last row, which leaves the max unchanged
    key_rows = np.minimum(key_rows, n_keys - 1).ravel()
    Kt = K[key_rows]
    if cols is not None:
        S = Qb[:, cols] @ Kt[:, cols].T
    else:
        S = Qb @ Kt.T
    return S.reshape(Qb.shape[0], len(reps), b_k).max(axis=(0, 2)), n_touched


def score_branch(Qblock: np.ndarray, K: np.ndarray, rep_block: int, cfg: HipConfig) -> float:
    """Max of the ``Qblock x K[rep_block]`` score tile."""
    Qb = np.atleast_2d(np.asarray(Qblock, dtype=np.float64))
    Kf = np.asarray(K, dtype=np.float64)
    b_k = min(cfg.b_k, Kf.shape[0])
    if not 0 <= rep_block * b_k < Kf.shape[0]:
        raise IndexError(f"key block {rep_block} out of range")
    cols = _component_subset(Qb, cfg.top_r)
    s, _ = _tile_scores(Qb, Kf, np.array([rep_block]), b_k, cols)
    return float(s[0])


def _component_subset(Qb: np.ndarray, top_r: Optional[int]) -> Optional[np.ndarray]:
    if top_r is None:
        return None
    d = Qb.shape[1]
    cols = top_r_select(Qb, top_r)
    return None if cols.size == d else cols


def iteration_count(n_blocks: int) -> int:
    """``ceil(log2(n_blocks))``."""
    return max(n_blocks - 1, 0).bit_length()


def _estimate(
    Q: np.ndarray,
    K: np.ndarray,
    cfg: HipConfig,
    causal: bool,
    counters: Optional[OpCounters],
    split_offsets: Optional[SplitOffsets] = None,
    trace: Optional[List[NodeSet]] = None,
) -> BlockMask:
    if K.shape[0] < 1:
        raise ValueError("K is empty")
    if Q.ndim != 2 or K.ndim != 2 or Q.shape[1] != K.shape[1]:
        raise ValueError("Q and K must be 2-D with equal head dim")
    T_q, T_k = Q.shape[0], K.shape[0]
    if causal and T_q > T_k:
        raise ValueError("causal estimation needs at least as many keys as queries")
    b_q, b_k = effective_block_sizes(cfg, T_q, T_k)
    n_nodes = math.ceil(cfg.k / b_k)
    Qf = Q.astype(np.float64)
    Kf = K.astype(np.float64)
    dim = Q.shape[1]
    rows: List[np.ndarray] = []
    n_qblocks = -(-T_q // b_q)
    for qb in range(n_qblocks):
        B = visible_key_blocks(qb, b_q, b_k, T_q, T_k, causal)
        if B <= n_nodes:
            rows.append(np.arange(B, dtype=np.int64))
            continue
        Qb = Qf[qb * b_q : min((qb + 1) * b_q, T_q)]
        cols = _component_subset(Qb, cfg.top_r)
        r_eff = dim if cols is None else cols.size
        nodes = initial_nodes(B, n_nodes)
        first = np.array([f for f, _ in nodes], dtype=np.int64)
        last = np.array([l for _, l in nodes], dtype=np.int64)
        if trace is not None:
            trace.append(NodeSet(qb, 0, tuple(nodes), None, B))
        for it in range(1, iteration_count(B) + 1):
            multi = first < last
            mid = (first + last + 1) // 2
            if split_offsets is not None:
                mid = np.clip(mid + split_offsets(qb, it, n_nodes), first + 1, last)
            # left halves (or untouched single blocks) and right halves
            cand_f = np.concatenate([first, mid[multi]])
            cand_l = np.concatenate([np.where(multi, mid - 1, last), last[multi]])
            scores, touched = _tile_scores(Qb, Kf, cand_f, b_k, cols)
            if counters is not None:
                counters.score_evaluations += Qb.shape[0] * touched
                counters.key_component_reads += touched * r_eff
            keep = np.lexsort((cand_f, -scores))[:n_nodes]
            keep = keep[np.argsort(cand_f[keep])]
            first, last = cand_f[keep], cand_l[keep]
            if trace is not None:
                trace.append(
                    NodeSet(qb, it, tuple(zip(first.tolist(), last.tolist())), tuple(scores[keep].tolist()), B)
                )
        rows.append(first.copy())
    return BlockMask(rows, b_q, b_k, T_q, T_k, causal)


def estimate_block_mask(
    Q: np.ndarray,
    K: np.ndarray,
    cfg: HipConfig,
    causal: bool = False,
    counters: Optional[OpCounters] = None,
    trace: Optional[List[NodeSet]] = None,
) -> BlockMask:
    """Estimate the block-sparse top-k mask for every query block.

    Query blocks whose visible key blocks already fit in ``n_nodes`` get the
    full visible set without any scoring. ``trace``, when given, collects a
    :class:`NodeSet` snapshot per query block and iteration.
    """
    mask = _estimate(Q, K, cfg, causal, counters, trace=trace)
    if counters is not None:
        counters.mask_estimations += 1
    return mask
