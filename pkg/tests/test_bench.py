import csv
import io
import math

import numpy as np
import pytest

from hipattn.bench import (
    COLUMNS,
    InvariantViolation,
    _check_counts,
    baseline_sink_window_mask,
    compare_masks,
    make_instance,
    run_bench,
    score_evaluation_bound,
    score_evaluation_exact,
    uniform_random_mask,
)
from hipattn.config import ConfigError, HipConfig
from hipattn.mask import OpCounters, estimate_block_mask
from hipattn.oracle import mask_metrics
from hipattn.tensors import gen_random


class TestSinkWindowBaseline:
    def test_short_prefix(self):
        rows = baseline_sink_window_mask(3, 8, 4)
        assert rows[2].tolist() == [0, 1, 2]

    def test_construction(self):
        rows = baseline_sink_window_mask(101, 8, 4)
        assert rows[100].tolist() == [0, 1, 2, 3, 97, 98, 99, 100]

    def test_needle_outside_sink_and_window(self):
        T, d, k = 4001, 8, 512
        K = gen_random(T, d, 3, "planted_needle", [50], 20.0)
        Q = np.zeros((T, d), np.float32)
        Q[:, 0] = 1.0
        rows = baseline_sink_window_mask(T, k, 32)
        assert 50 not in rows[4000]
        assert rows[4000].size == k
        # the exact top-k for that row contains the needle, the baseline recalls none of it
        m = mask_metrics([rows[4000]], Q[4000:4001], K, 1, causal=False)
        assert m.recall[0] == 0.0

    def test_budget_too_small(self):
        with pytest.raises(ValueError):
            baseline_sink_window_mask(10, 2, 4)

    def test_uniform_random_budget(self):
        rows = uniform_random_mask(64, 64, 10, True, seed=1)
        for i, r in enumerate(rows):
            assert r.size == min(10, i + 1)
            assert r.max() <= i


class TestCompare:
    def test_exact_topk_full_recall(self, rng):
        Q, K = (rng.standard_normal((64, 8)).astype(np.float32) for _ in range(2))
        rows = {r["method"]: r for r in compare_masks(Q, K, HipConfig(k=16, b_q=4, b_k=2, sink_size=4))}
        assert rows["exact_topk"]["mean_recall"] == pytest.approx(1.0)
        assert set(rows) == {"hip", "hip_ensemble", "exact_topk", "sink_window", "uniform_random"}

    def test_uniform_random_full_budget(self, rng):
        Q, K = (rng.standard_normal((48, 8)).astype(np.float32) for _ in range(2))
        rows = compare_masks(Q, K, HipConfig(k=48, b_q=4, b_k=2, sink_size=4), ["uniform_random"])
        assert rows[0]["mean_recall"] == pytest.approx(1.0)
        assert rows[0]["mean_mass"] == pytest.approx(1.0)

    def test_equal_budgets(self, rng):
        Q, K = (rng.standard_normal((64, 8)).astype(np.float32) for _ in range(2))
        cfg = HipConfig(k=16, b_q=4, b_k=2, sink_size=4)
        mask = estimate_block_mask(Q, K, cfg, True)
        assert max(r.size for r in mask.to_token_mask()) <= cfg.k

    def test_unknown_method(self, rng):
        Q = rng.standard_normal((8, 4)).astype(np.float32)
        with pytest.raises(ValueError):
            compare_masks(Q, Q, HipConfig(k=4, b_q=2, b_k=1, sink_size=1), ["nope"])


def _independent_exact(T, k, b_q, b_k):
    # non-causal layout with power-of-two leaves: a halving rounds plus n_it - a re-scoring rounds
    n_nodes = math.ceil(k / b_k)
    B = T // b_k
    n_it = math.ceil(math.log2(B))
    a = int(math.log2(B // n_nodes))
    return (T // b_q) * n_nodes * (n_it + a) * b_q * b_k


class TestClosedForm:
    @pytest.mark.parametrize("T", [1024, 2048, 4096, 8192])
    def test_sweep_fixed_k(self, T):
        cfg = HipConfig(k=256)
        assert score_evaluation_exact(T, T, cfg, False) == _independent_exact(T, 256, 32, 2)

    def test_bench_counts_match(self):
        report = run_bench({"k": 256, "sweep": {"T": [1024, 2048]}, "methods": ["hip"]})
        for row in report.rows:
            assert row["score_evaluations"] == _independent_exact(row["T"], 256, 32, 2)
            assert row["score_evaluations"] <= score_evaluation_bound(row["T"], row["T"], HipConfig(k=256), False)

    @pytest.mark.parametrize("T,causal", [(300, True), (512, True), (257, False)])
    def test_bound_holds(self, rng, T, causal):
        cfg = HipConfig(k=32, b_q=8, b_k=2)
        Q, K = (rng.standard_normal((T, 8)).astype(np.float32) for _ in range(2))
        ctr = OpCounters()
        estimate_block_mask(Q, K, cfg, causal, ctr)
        assert ctr.score_evaluations <= score_evaluation_bound(T, T, cfg, causal)
        exact = score_evaluation_exact(T, T, cfg, causal)
        if exact is not None:
            assert ctr.score_evaluations == exact

    def test_mismatch_raises(self):
        cfg = HipConfig(k=256)
        with pytest.raises(InvariantViolation):
            _check_counts(1024, cfg, False, 1)

    def test_unscored_is_zero(self):
        assert score_evaluation_exact(256, 256, HipConfig(k=512), False) == 0
        assert score_evaluation_bound(256, 256, HipConfig(k=512), False) == 0


class TestRunBench:
    CONF = {"k": 64, "b_q": 16, "sweep": {"T": [256, 512]}, "methods": ["hip", "exact_topk", "sink_window"], "quality": True}

    def test_empty_sweep(self):
        with pytest.raises(ConfigError):
            run_bench({"sweep": {"T": []}})

    def test_missing_sweep(self):
        with pytest.raises(ConfigError):
            run_bench({"k": 64})

    def test_bad_method(self):
        with pytest.raises(ConfigError):
            run_bench({"sweep": {"T": [64]}, "methods": ["magic"]})

    def test_byte_identical(self):
        assert run_bench(self.CONF).to_csv() == run_bench(self.CONF).to_csv()

    def test_threads_do_not_change_output(self):
        assert run_bench(self.CONF, threads=3).to_csv() == run_bench(self.CONF).to_csv()

    def test_columns(self):
        text = run_bench(self.CONF).to_csv()
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        assert tuple(header) == COLUMNS
        body = list(reader)
        assert len(body) == 2 * 3
        assert all(r[COLUMNS.index("wall_time")] == "" for r in body)

    def test_row_order(self):
        rows = run_bench({**self.CONF, "sweep": {"T": [512, 256]}}).rows
        assert [r["T"] for r in rows] == [256] * 3 + [512] * 3
        assert [r["method"] for r in rows[:3]] == ["hip", "exact_topk", "sink_window"]

    def test_record_time(self):
        rows = run_bench({"k": 64, "sweep": {"T": [128]}, "record_time": True}).rows
        assert rows[0]["wall_time"] is not None and rows[0]["wall_time"] >= 0

    def test_decode_method(self):
        conf = {"k": 32, "b_q": 8, "r_m": 4, "sweep": {"T": [64]}, "methods": ["hip_decode"],
                "d": 8, "decode": {"layers": 4, "n_steps": 8}}
        row = run_bench(conf).rows[0]
        assert row["score_evaluations"] > 0 and row["key_block_reads"] > 0

    def test_counters_match_pipeline(self):
        row = run_bench({"k": 64, "sweep": {"T": [256]}}).rows[0]
        Q, K, V = make_instance(256, 64, 0)
        ctr = OpCounters()
        estimate_block_mask(Q, K, HipConfig(k=64), False, ctr)
        assert row["score_evaluations"] == ctr.score_evaluations
