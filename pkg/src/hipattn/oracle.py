"""Quadratic reference implementations.

Everything in this module materialises the full ``T_q x T_k`` score matrix
on purpose; it is the ground truth the sub-quadratic paths are checked
against. Queries are aligned to the end of the key sequence, so query row
``i`` sits at position ``i + T_k - T_q`` (the usual decode convention; with
``T_q == T_k`` this is just ``i``).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List

import numpy as np

TokenMask = List[np.ndarray]


class EmptyMaskWarning(RuntimeWarning):
    """A query row had nothing to attend to and produced a zero vector."""


def query_positions(n_queries: int, n_keys: int) -> np.ndarray:
    return np.arange(n_queries) + (n_keys - n_queries)


def visible_lengths(n_queries: int, n_keys: int, causal: bool) -> np.ndarray:
    """Number of keys each query row may see."""
    if not causal:
        return np.full(n_queries, n_keys, dtype=np.int64)
    return np.clip(query_positions(n_queries, n_keys) + 1, 0, n_keys)


def _check_qkv(Q, K, V=None):
    if Q.ndim != 2 or K.ndim != 2:
        raise ValueError("Q and K must be 2-D")
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"head dim mismatch: Q has {Q.shape[1]}, K has {K.shape[1]}")
    if V is not None and V.shape[0] != K.shape[0]:
        raise ValueError(f"K has {K.shape[0]} rows but V has {V.shape[0]}")
    if K.shape[0] < 1:
        raise ValueError("K must have at least one row")


def scaled_scores(Q: np.ndarray, K: np.ndarray) -> np.ndarray:
    """``Q K^T / sqrt(d)`` in float64."""
    d = Q.shape[1]
    return (Q.astype(np.float64) @ K.astype(np.float64).T) / np.sqrt(d)


def _causal_fill(S: np.ndarray, causal: bool) -> np.ndarray:
    if causal:
        vis = visible_lengths(S.shape[0], S.shape[1], True)
        future = np.arange(S.shape[1])[None, :] >= vis[:, None]
        S = np.where(future, -np.inf, S)
    return S


def _softmax_rows(S: np.ndarray) -> np.ndarray:
    m = S.max(axis=1, keepdims=True)
    empty = ~np.isfinite(m)
    m = np.where(empty, 0.0, m)
    E = np.exp(S - m)
    den = E.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        P = np.where(den > 0, E / np.where(den > 0, den, 1.0), 0.0)
    return P


def attention_probs(Q: np.ndarray, K: np.ndarray, causal: bool) -> np.ndarray:
    """Row-stochastic dense attention probabilities (float64)."""
    _check_qkv(Q, K)
    return _softmax_rows(_causal_fill(scaled_scores(Q, K), causal))


def dense_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray, causal: bool = False) -> np.ndarray:
    _check_qkv(Q, K, V)
    P = attention_probs(Q, K, causal)
    return (P @ V.astype(np.float64)).astype(np.float32)


def exact_topk_mask(Q: np.ndarray, K: np.ndarray, k: int, causal: bool = False) -> TokenMask:
    """Indices of the ``k`` largest scores per row; ties go to the smaller index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_qkv(Q, K)
    S = Q.astype(np.float64) @ K.astype(np.float64).T
    vis = visible_lengths(Q.shape[0], K.shape[0], causal)
    out: TokenMask = []
    for i in range(S.shape[0]):
        n = int(vis[i])
        row = S[i, :n]
        order = np.argsort(-row, kind="stable")[: min(k, n)]
        out.append(np.sort(order).astype(np.int64))
    return out


def full_causal_mask(n_queries: int, n_keys: int, causal: bool = True) -> TokenMask:
    vis = visible_lengths(n_queries, n_keys, causal)
    return [np.arange(int(v), dtype=np.int64) for v in vis]


def masked_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray, mask: TokenMask) -> np.ndarray:
    """Softmax restricted to the selected entries of each row."""
    _check_qkv(Q, K, V)
    if len(mask) != Q.shape[0]:
        raise ValueError(f"mask has {len(mask)} rows, Q has {Q.shape[0]}")
    T_k = K.shape[0]
    S = scaled_scores(Q, K)
    keep = np.zeros_like(S, dtype=bool)
    for i, idx in enumerate(mask):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= T_k):
            raise IndexError(f"row {i}: mask index out of range [0, {T_k})")
        keep[i, idx] = True
    empty = ~keep.any(axis=1)
    if empty.any():
        warnings.warn(
            f"{int(empty.sum())} query row(s) have an empty mask; returning zeros",
            EmptyMaskWarning,
            stacklevel=2,
        )
    P = _softmax_rows(np.where(keep, S, -np.inf))
    return (P @ V.astype(np.float64)).astype(np.float32)


@dataclass
class MaskMetrics:
    recall: np.ndarray
    mass: np.ndarray

    @property
    def mean_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def mean_mass(self) -> float:
        return float(self.mass.mean())


def mask_metrics(
    estimated: TokenMask,
    Q: np.ndarray,
    K: np.ndarray,
    k: int,
    causal: bool = False,
    probs: np.ndarray | None = None,
    exact: TokenMask | None = None,
) -> MaskMetrics:
    """Recall against exact top-k and captured softmax mass, per row.

    ``probs`` and ``exact`` may be passed in to reuse an earlier quadratic pass
    when comparing several estimates on one instance.
    """
    _check_qkv(Q, K)
    if len(estimated) != Q.shape[0]:
        raise ValueError("estimated mask row count does not match Q")
    if probs is None:
        probs = attention_probs(Q, K, causal)
    if exact is None:
        exact = exact_topk_mask(Q, K, k, causal)
    n = Q.shape[0]
    recall = np.empty(n)
    mass = np.empty(n)
    for i in range(n):
        est = np.unique(np.asarray(estimated[i], dtype=np.int64))
        ex = exact[i]
        recall[i] = np.intersect1d(est, ex, assume_unique=True).size / ex.size if ex.size else 1.0
        mass[i] = min(1.0, float(probs[i, est].sum())) if est.size else 0.0
    return MaskMetrics(recall=recall, mass=mass)
