"""Sweeps, baseline masks, mask-quality comparison and closed-form op counts."""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .config import ConfigError, EnsembleConfig, HipConfig, config_from_dict
from .decode import decode_run, new_synthetic_model
from .ensemble import ensemble_block_mask
from .mask import OpCounters, estimate_block_mask, iteration_count, visible_key_blocks
from .oracle import TokenMask, attention_probs, exact_topk_mask, mask_metrics, visible_lengths
from .sparse import sparse_attention, union_effective_mask
from .tensors import gen_random

METHODS = ("hip", "hip_ensemble", "exact_topk", "sink_window", "uniform_random", "hip_decode")
COLUMNS = (
    "T", "k", "b_q", "b_k", "r_m", "method", "mean_recall", "mean_mass",
    "score_evaluations", "key_block_reads", "wall_time",
)
SWEEP_KEYS = ("T", "k", "b_q", "b_k", "r_m")
# counter regression sweep: non-causal so every point has an exact closed form
DEFAULT_SWEEP = {"T": [1024, 2048, 4096, 8192], "k": [256, 512], "b_q": [16, 32], "b_k": [2, 4]}


class InvariantViolation(RuntimeError):
    """A measured counter disagrees with its closed form."""


def baseline_sink_window_mask(T: int, k: int, sink_size: int, causal: bool = True) -> TokenMask:
    """StreamingLLM-style mask: ``sink_size`` leading tokens plus the ``k - sink_size`` latest.

    The window always ends at the query's own position, so ``causal`` only
    matters through the shared position convention.
    """
    if k < sink_size:
        raise ValueError("k must be >= sink_size")
    recent = k - sink_size
    rows: TokenMask = []
    for pos in range(T):
        sink = np.arange(min(sink_size, pos + 1))
        window = np.arange(max(pos - recent + 1, 0), pos + 1) if recent else np.empty(0, dtype=np.int64)
        rows.append(np.union1d(sink, window).astype(np.int64))
    return rows


def uniform_random_mask(n_queries: int, n_keys: int, k: int, causal: bool, seed: int) -> TokenMask:
    rng = np.random.default_rng(seed)
    vis = visible_lengths(n_queries, n_keys, causal)
    return [np.sort(rng.choice(int(v), size=min(k, int(v)), replace=False)).astype(np.int64) for v in vis]


def _query_block_rows(T_q: int, b_q: int) -> List[int]:
    return [min(b_q, T_q - s) for s in range(0, T_q, b_q)]


def score_evaluation_bound(T_q: int, T_k: int, cfg: HipConfig, causal: bool) -> int:
    """``sum over query blocks of 2 * n_nodes * n_it * rows * b_k``."""
    b_q, b_k = min(cfg.b_q, T_q), min(cfg.b_k, T_k)
    n_nodes = math.ceil(cfg.k / b_k)
    total = 0
    for qb, rows in enumerate(_query_block_rows(T_q, b_q)):
        B = visible_key_blocks(qb, b_q, b_k, T_q, T_k, causal)
        if B > n_nodes:
            total += 2 * n_nodes * iteration_count(B) * rows * b_k
    return total


def score_evaluation_exact(T_q: int, T_k: int, cfg: HipConfig, causal: bool) -> Optional[int]:
    """Exact estimator dot-product count, or None where it depends on the data.

    When every node starts with the same power-of-two length ``2**a``, the
    first ``a`` rounds score ``2 * n_nodes`` tiles and the remaining
    ``n_it - a`` rounds re-score ``n_nodes`` single blocks. Unequal or
    ragged layouts make the count depend on which branches win.
    """
    b_q, b_k = min(cfg.b_q, T_q), min(cfg.b_k, T_k)
    n_nodes = math.ceil(cfg.k / b_k)
    total = 0
    for qb, rows in enumerate(_query_block_rows(T_q, b_q)):
        B = visible_key_blocks(qb, b_q, b_k, T_q, T_k, causal)
        if B <= n_nodes:
            continue
        if T_k % b_k or B % n_nodes:
            return None
        length = B // n_nodes
        if length & (length - 1):
            return None
        a = length.bit_length() - 1
        total += n_nodes * (iteration_count(B) + a) * rows * b_k
    return total


# ---------------------------------------------------------------- reports


@dataclass
class BenchReport:
    metadata: Dict[str, Any]
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r.get(c)) for c in COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"metadata": self.metadata, "rows": self.rows}, indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def report_row(T, cfg: HipConfig, method, metrics=None, counters: Optional[OpCounters] = None, wall=None) -> dict:
    return {
        "T": T, "k": cfg.k, "b_q": cfg.b_q, "b_k": cfg.b_k, "r_m": cfg.r_m, "method": method,
        "mean_recall": None if metrics is None else metrics[0],
        "mean_mass": None if metrics is None else metrics[1],
        "score_evaluations": 0 if counters is None else counters.score_evaluations,
        "key_block_reads": 0 if counters is None else counters.key_block_reads,
        "wall_time": wall,
    }


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def make_instance(T: int, d: int, seed: int, instance: int = 0):
    """Q, K, V for one benchmark instance; depends only on (T, d, seed, instance)."""
    return tuple(gen_random(T, d, _derived_seed(seed, T, d, instance, w)) for w in range(3))


def compare_masks(
    Q: np.ndarray,
    K: np.ndarray,
    cfg: HipConfig,
    baselines: Iterable[str] = ("hip", "hip_ensemble", "exact_topk", "sink_window", "uniform_random"),
    causal: bool = True,
    seed: int = 0,
) -> List[dict]:
    """Mask quality of each method at an equal token budget ``k``.

    The ensemble is always truncated (``tau = 1``) here so that no method
    gets more than ``ceil(k / b_k)`` blocks.
    """
    T_q, T_k = Q.shape[0], K.shape[0]
    probs = attention_probs(Q, K, causal)
    exact = exact_topk_mask(Q, K, cfg.k, causal)
    rows = []
    for method in baselines:
        ctr = OpCounters()
        if method == "hip":
            tokens = estimate_block_mask(Q, K, cfg, causal, ctr).to_token_mask()
        elif method == "hip_ensemble":
            ens = cfg.ensemble or EnsembleConfig()
            ens = EnsembleConfig(ens.n_e, ens.r_e, ens.theta_vote, 1, ens.l_e, ens.seed)
            tokens = ensemble_block_mask(Q, K, cfg, causal, ctr, ens).to_token_mask()
        elif method == "exact_topk":
            tokens = exact
            ctr.score_evaluations = int(visible_lengths(T_q, T_k, causal).sum())
        elif method == "sink_window":
            if T_q != T_k:
                raise ValueError("sink_window baseline needs square attention")
            tokens = baseline_sink_window_mask(T_k, cfg.k, cfg.sink_size, causal)
        elif method == "uniform_random":
            tokens = uniform_random_mask(T_q, T_k, cfg.k, causal, seed)
        else:
            raise ValueError(f"unknown method {method!r}")
        m = mask_metrics(tokens, Q, K, cfg.k, causal, probs=probs, exact=exact)
        rows.append({"method": method, "mean_recall": m.mean_recall, "mean_mass": m.mean_mass, "counters": ctr})
    return rows


def _sweep_points(conf: Mapping[str, Any], base: HipConfig) -> List[tuple]:
    sweep = conf.get("sweep")
    if not isinstance(sweep, Mapping):
        raise ConfigError("config needs a 'sweep' object")
    unknown = set(sweep) - set(SWEEP_KEYS)
    if unknown:
        raise ConfigError(f"unknown sweep axes {sorted(unknown)}")
    axes = {}
    for key in SWEEP_KEYS:
        default = [getattr(base, key)] if key != "T" else None
        vals = sweep.get(key, default)
        if not isinstance(vals, list) or not vals or not all(isinstance(v, int) and not isinstance(v, bool) for v in vals):
            raise ConfigError(f"sweep.{key} must be a non-empty list of integers")
        axes[key] = vals
    points = []
    for T, k, b_q, b_k, r_m in itertools.product(*(axes[k] for k in SWEEP_KEYS)):
        if T < 1:
            raise ConfigError("sweep.T values must be >= 1")
        points.append((T, base.replace(k=k, b_q=b_q, b_k=b_k, r_m=r_m)))
    return points


def _run_point(T: int, cfg: HipConfig, conf: Mapping[str, Any]) -> List[dict]:
    seed = conf.get("seed", 0)
    d = conf.get("d", 64)
    causal = bool(conf.get("causal", False))
    methods = conf.get("methods", ["hip"])
    quality = bool(conf.get("quality", False))
    timed = bool(conf.get("record_time", False))
    n_inst = conf.get("instances", 1)
    out = []
    for method in methods:
        ctr = OpCounters()
        recalls, masses = [], []
        t0 = time.perf_counter()
        for inst in range(n_inst):
            Q, K, V = make_instance(T, d, seed, inst)
            if method == "hip_decode":
                dec = conf.get("decode", {})
                layers = dec.get("layers", 4)
                model = new_synthetic_model(layers, d, _derived_seed(seed, inst, 7))
                trace = decode_run(model, Q, dec.get("n_steps", 16), cfg.replace(l_d=min(cfg.l_d, layers)))
                for r in trace.records:
                    if r.step > 0:
                        ctr.score_evaluations += r.counters["score_evaluations"]
                        ctr.key_block_reads += r.counters["key_block_reads"]
                continue
            if method in ("hip", "hip_ensemble"):
                local = OpCounters()
                if method == "hip":
                    mask = estimate_block_mask(Q, K, cfg, causal, local)
                    _check_counts(T, cfg, causal, local.score_evaluations)
                else:
                    mask = ensemble_block_mask(Q, K, cfg, causal, local)
                eff = union_effective_mask(mask, cfg.sink_size, cfg.window_size)
                sparse_attention(Q, K, V, eff, local)
                ctr += local
            elif method == "exact_topk":
                ctr.score_evaluations += int(visible_lengths(T, T, causal).sum())
            if quality:
                rows = compare_masks(Q, K, cfg, [method], causal, _derived_seed(seed, inst, 11))
                recalls.append(rows[0]["mean_recall"])
                masses.append(rows[0]["mean_mass"])
        wall = time.perf_counter() - t0 if timed else None
        metrics = (float(np.mean(recalls)), float(np.mean(masses))) if recalls else None
        out.append(report_row(T, cfg, method, metrics, ctr, wall))
    return out


def _check_counts(T: int, cfg: HipConfig, causal: bool, measured: int) -> None:
    bound = score_evaluation_bound(T, T, cfg, causal)
    exact = score_evaluation_exact(T, T, cfg, causal)
    if measured > bound:
        raise InvariantViolation(f"T={T}: {measured} score evaluations exceed bound {bound}")
    if exact is not None and measured != exact:
        raise InvariantViolation(f"T={T}: {measured} score evaluations, closed form gives {exact}")


def run_bench(conf: Mapping[str, Any], threads: int = 1) -> BenchReport:
    """Run every sweep point and method described by ``conf``.

    Output is deterministic unless ``record_time`` is set, in which case the
    ``wall_time`` column is filled in.
    """
    if not isinstance(conf, Mapping):
        raise ConfigError("bench config must be a JSON object")
    base = config_from_dict(conf, strict=False)
    methods = conf.get("methods", ["hip"])
    if not isinstance(methods, list) or not methods or any(m not in METHODS for m in methods):
        raise ConfigError(f"methods must be a non-empty list drawn from {METHODS}")
    for key, lo in (("d", 1), ("instances", 1), ("seed", None)):
        v = conf.get(key)
        if v is not None and (not isinstance(v, int) or isinstance(v, bool) or (lo is not None and v < lo)):
            raise ConfigError(f"{key} must be an integer" + (f" >= {lo}" if lo else ""))
    points = _sweep_points(conf, base)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda p: _run_point(p[0], p[1], conf), points))
    order = {m: i for i, m in enumerate(METHODS)}
    rows = sorted(
        (r for chunk in results for r in chunk),
        key=lambda r: (r["T"], r["k"], r["b_q"], r["b_k"], r["r_m"], order[r["method"]]),
    )
    meta = {"seed": conf.get("seed", 0), "config": base.to_dict(), "bench": dict(conf)}
    return BenchReport(meta, rows)
