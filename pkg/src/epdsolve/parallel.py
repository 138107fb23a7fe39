"""Deterministic fan-out/fan-in evaluation of independent oracle calls.

A fixed-size thread pool is the only concurrency boundary in the package.
Results are returned in request order, so downstream reductions are bitwise
independent of the worker count.
"""

from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .gmm import Oracle

__all__ = [
    "EvalRequest",
    "BranchEvalError",
    "WorkerPool",
    "par_map_eval",
    "LatencyReport",
    "bench_step_latency",
]


@dataclass(frozen=True)
class EvalRequest:
    """One oracle evaluation: state, time, and the branch index it belongs to."""

    state: np.ndarray
    time: float
    branch: int


class BranchEvalError(RuntimeError):
    """A worker failed while evaluating one branch."""

    def __init__(self, branch: int, cause: BaseException):
        super().__init__(f"oracle evaluation failed for branch {branch}: {cause!r}")
        self.branch = branch


class WorkerPool:
    """Thread pool with a synchronous, order-preserving map interface.

    Create once per process and reuse; per-dispatch overhead is tens of
    microseconds, far below the cost of a realistic oracle call.
    """

    def __init__(self, workers: int = 1):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = workers
        self._pool = ThreadPoolExecutor(max_workers=workers)

    def map_eval(self, oracle: Oracle, requests: Sequence[EvalRequest]) -> list[np.ndarray]:
        futures = [self._pool.submit(oracle, req.state, req.time) for req in requests]
        results = []
        failure: BranchEvalError | None = None
        for req, fut in zip(requests, futures):
            try:
                results.append(fut.result())
            except BaseException as exc:  # surface the lowest failing branch
                if failure is None:
                    failure = BranchEvalError(req.branch, exc)
        if failure is not None:
            raise failure
        return results

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
        return False


def par_map_eval(executor: WorkerPool, oracle: Oracle, requests: Sequence[EvalRequest]) -> list[np.ndarray]:
    """Evaluate all requests through the pool, results in request order."""
    if not requests:
        return []
    return executor.map_eval(oracle, requests)


@dataclass
class LatencyReport:
    """Mean per-step latency and 95% confidence half-widths per (K, workers)."""

    rows: list[dict]

    def to_csv(self) -> str:
        lines = ["K,workers,mean_ms,ci95_ms,reps"]
        for r in self.rows:
            lines.append(f"{r['K']},{r['workers']},{r['mean_ms']!r},{r['ci95_ms']!r},{r['reps']}")
        return "\n".join(lines) + "\n"


def _ci95_half_width(samples: Sequence[float]) -> float:
    n = len(samples)
    sd = statistics.stdev(samples)
    if sd == 0.0:
        return 0.0
    return float(stats.t.ppf(0.975, n - 1) * sd / np.sqrt(n))


def bench_step_latency(
    oracle: Oracle,
    k_values: Sequence[int],
    workers: int | Sequence[int],
    reps: int,
    warmup: int = 3,
    t_cur: float = 2.0,
    t_nxt: float = 1.0,
    dim: int = 2,
) -> LatencyReport:
    """Measure wall time of one ensemble step per (K, workers) combination.

    The start gradient is supplied up front (the shape of an analytic first
    step), so the measurement isolates the K-way parallel fan-out: with
    enough workers extra branches add no sequential depth, while a single
    worker serializes them.  Step outputs are identical across repetitions;
    only timings vary.
    """
    from .epd import DerivedBranch, epd_step  # local import to avoid a cycle

    if reps < 2:
        raise ValueError("reps must be >= 2 to form a confidence interval")
    worker_counts = [workers] if isinstance(workers, int) else list(workers)
    x = np.full(dim, 0.5)
    d0 = np.full(dim, 0.1)
    rows = []
    for w in worker_counts:
        with WorkerPool(w) as pool:
            for k in k_values:
                ratios = (np.arange(1, k + 1)) / (k + 1.0)
                branches = [
                    DerivedBranch(
                        tau=float(t_cur**r * t_nxt ** (1.0 - r)),
                        lam=1.0 / k,
                        s_mult=1.0,
                        sig_mult=1.0,
                        delta=0.0,
                    )
                    for r in ratios
                ]
                timings = []
                for rep in range(warmup + reps):
                    start = time.perf_counter()
                    epd_step(oracle, pool, x, t_cur, t_nxt, branches, d_override=d0)
                    elapsed_ms = (time.perf_counter() - start) * 1e3
                    if rep >= warmup:
                        timings.append(elapsed_ms)
                rows.append(
                    {
                        "K": k,
                        "workers": w,
                        "mean_ms": float(np.mean(timings)),
                        "ci95_ms": _ci95_half_width(timings),
                        "reps": reps,
                    }
                )
    return LatencyReport(rows=rows)
