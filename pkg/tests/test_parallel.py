import time

import numpy as np
import pytest

from epdsolve import (
    BranchEvalError,
    EvalRequest,
    WorkerPool,
    bench_step_latency,
    par_map_eval,
    with_cost,
)
from epdsolve.parallel import _ci95_half_width


class TestParMapEval:
    def test_results_bitwise_identical_across_worker_counts(self, mixture):
        rng = np.random.default_rng(8)
        requests = [
            EvalRequest(state=rng.normal(size=2) * 3, time=float(rng.uniform(0.05, 20)), branch=i)
            for i in range(100)
        ]
        with WorkerPool(1) as p1, WorkerPool(4) as p4:
            out1 = par_map_eval(p1, mixture, requests)
            out4 = par_map_eval(p4, mixture, requests)
        assert len(out1) == len(out4) == 100
        for a, b in zip(out1, out4):
            np.testing.assert_array_equal(a, b)

    def test_empty_request_list(self, pool, mixture):
        assert par_map_eval(pool, mixture, []) == []

    def test_failure_names_the_branch(self, pool):
        def flaky(x, t):
            if t > 1.0:
                raise FloatingPointError("boom")
            return x

        requests = [
            EvalRequest(state=np.zeros(2), time=0.5, branch=0),
            EvalRequest(state=np.zeros(2), time=2.0, branch=1),
            EvalRequest(state=np.zeros(2), time=3.0, branch=2),
        ]
        with pytest.raises(BranchEvalError, match="branch 1") as err:
            par_map_eval(pool, flaky, requests)
        assert err.value.branch == 1

    def test_costed_calls_overlap_with_enough_workers(self, mixture):
        costed = with_cost(mixture, 10_000_000)
        requests = [EvalRequest(state=np.ones(2), time=1.0, branch=i) for i in range(3)]
        with WorkerPool(3) as p:
            par_map_eval(p, costed, requests)  # warm the pool
            start = time.perf_counter()
            par_map_eval(p, costed, requests)
            elapsed = time.perf_counter() - start
        single = 0.010
        assert elapsed < 2 * single

    def test_worker_count_validation(self):
        with pytest.raises(ValueError):
            WorkerPool(0)


class TestLatencyBench:
    def test_rejects_too_few_reps(self, mixture):
        with pytest.raises(ValueError):
            bench_step_latency(mixture, k_values=[1], workers=1, reps=1)

    def test_equal_samples_give_zero_interval(self):
        assert _ci95_half_width([3.0, 3.0, 3.0, 3.0]) == 0.0

    def test_interval_positive_for_spread_samples(self):
        assert _ci95_half_width([1.0, 2.0, 3.0]) > 0

    def test_report_rows_and_csv(self, mixture):
        report = bench_step_latency(mixture, k_values=[1, 2], workers=[1, 2], reps=3, warmup=1)
        assert len(report.rows) == 4
        csv = report.to_csv()
        assert csv.splitlines()[0] == "K,workers,mean_ms,ci95_ms,reps"
        assert all(r["ci95_ms"] >= 0 for r in report.rows)
