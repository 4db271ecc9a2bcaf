"""Randomised mask sampling and vote-based merging."""
from __future__ import annotations

import math
from typing import List, Optional, Sequence

import numpy as np

from .config import EnsembleConfig, HipConfig
from .mask import BlockMask, NodeSet, OpCounters, _estimate


def _offset_generator(sample_seed: int, r_e: float):
    radius = int(math.floor(r_e + 0.5))
    if radius == 0:
        return None

    def offsets(qb: int, iteration: int, n_nodes: int) -> np.ndarray:
        # node j of the (qb, iteration) round always gets the j-th draw
        rng = np.random.default_rng([sample_seed, qb, iteration])
        return rng.integers(-radius, radius + 1, size=n_nodes)

    return offsets


def sample_random_mask(
    Q: np.ndarray,
    K: np.ndarray,
    cfg: HipConfig,
    sample_seed: int,
    causal: bool = False,
    counters: Optional[OpCounters] = None,
    trace: Optional[List[NodeSet]] = None,
    r_e: Optional[float] = None,
) -> BlockMask:
    """Tree search whose split points are jittered by up to ``round(r_e)`` blocks.

    ``r_e`` defaults to ``cfg.ensemble.r_e`` (0 when no ensemble is set); a zero
    radius runs exactly the deterministic estimator.
    """
    if r_e is None:
        r_e = cfg.ensemble.r_e if cfg.ensemble is not None else 0.0
    mask = _estimate(Q, K, cfg, causal, counters, _offset_generator(sample_seed, r_e), trace)
    if counters is not None:
        counters.mask_estimations += 1
    return mask


def vote_masks(samples: Sequence[BlockMask], theta_vote: int, tau: int, k: int) -> BlockMask:
    """Keep block indices chosen by at least ``theta_vote`` samples.

    With ``tau == 1`` each row is cut back to ``ceil(k / b_k)`` indices,
    preferring more votes and then smaller indices.
    """
    if not samples:
        raise ValueError("need at least one sample")
    ref = samples[0]
    shape = (ref.b_q, ref.b_k, ref.n_queries, ref.n_keys, ref.causal, ref.n_query_blocks)
    for s in samples[1:]:
        if (s.b_q, s.b_k, s.n_queries, s.n_keys, s.causal, s.n_query_blocks) != shape:
            raise ValueError("samples disagree on block geometry")
    if theta_vote < 1:
        raise ValueError("theta_vote must be >= 1")
    n_nodes = math.ceil(k / ref.b_k)
    rows = []
    for qb in range(ref.n_query_blocks):
        idx, votes = np.unique(np.concatenate([s.rows[qb] for s in samples]), return_counts=True)
        keep = votes >= theta_vote
        idx, votes = idx[keep], votes[keep]
        if tau and idx.size > n_nodes:
            order = np.lexsort((idx, -votes))[:n_nodes]
            idx = np.sort(idx[order])
        rows.append(idx.astype(np.int64))
    return BlockMask(rows, ref.b_q, ref.b_k, ref.n_queries, ref.n_keys, ref.causal)


def ensemble_block_mask(
    Q: np.ndarray,
    K: np.ndarray,
    cfg: HipConfig,
    causal: bool = False,
    counters: Optional[OpCounters] = None,
    ens: Optional[EnsembleConfig] = None,
) -> BlockMask:
    """Draw ``n_e`` jittered masks and merge them by vote.

    Counts as a single mask estimation; the per-sample scoring work is added
    to ``counters`` in full.
    """
    ens = ens or cfg.ensemble or EnsembleConfig()
    offsets = [_offset_generator(ens.seed * 1_000_003 + i, ens.r_e) for i in range(ens.n_e)]
    samples = [_estimate(Q, K, cfg, causal, counters, off) for off in offsets]
    if counters is not None:
        counters.mask_estimations += 1
    return vote_masks(samples, ens.theta_vote, ens.tau, cfg.k)


def retention_ratio(before: BlockMask, after: BlockMask) -> float:
    """Selected blocks after voting divided by selected blocks before."""
    b = sum(r.size for r in before.rows)
    a = sum(r.size for r in after.rows)
    return a / b if b else 1.0
