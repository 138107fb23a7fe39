"""Experiment harness: solver comparisons, metrics, and fixture validation.

Drives the grid of (solver, parallel budget, branch count) rows from a single
config, compares every trajectory against a fine reference run, and emits
plot-ready CSV files.  Re-running with the same config and seeds reproduces
the metrics files byte for byte (latency files carry timings and are exempt).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .distill import TrainConfig, train
from .epd import Bounds, EpdParams, load_params, run_epd
from .gmm import GaussianMixture, Oracle, benchmark_mixture, load_gmm, with_cost
from .parallel import WorkerPool, bench_step_latency
from .schedules import TimeSchedule, build_schedule, refine_for_teacher
from .solvers import BASELINE_KINDS, Trajectory, run_sampler, trajectory_to_csv

__all__ = [
    "ExperimentConfig",
    "MetricsRow",
    "UnachievableBudget",
    "resolve_steps",
    "compute_trajectory_metrics",
    "reference_trajectory",
    "initial_states_for_seeds",
    "run_experiment",
    "validate_fixtures",
    "FixtureReport",
]

EPD_KINDS = ("epd", "epd-plugin")
_NODE_MATCH_TOL = 1e-12


class UnachievableBudget(ValueError):
    """The requested parallel budget cannot be met by this solver's accounting."""


def resolve_steps(kind: str, budget: int, afs: bool) -> int:
    """Number of schedule steps a solver needs to hit a parallel budget.

    Single-evaluation steps (ddim, ipndm) use one unit per step; two-depth
    steps (heun, dpm2, and the ensemble solvers) use two, and the analytic
    first step saves one unit either way.
    """
    if budget < 1:
        raise UnachievableBudget(f"budget must be >= 1, got {budget}")
    saving = 1 if afs else 0
    if kind in ("ddim", "ipndm"):
        return budget + saving
    if kind in ("heun", "dpm2") + EPD_KINDS:
        if (budget + saving) % 2 != 0:
            parity = "odd" if afs else "even"
            raise UnachievableBudget(f"{kind} needs an {parity} budget, got {budget}")
        n = (budget + saving) // 2
        if n < 1:
            raise UnachievableBudget(f"budget {budget} too small for {kind}")
        return n
    raise ValueError(f"unknown solver kind {kind!r}")


@dataclass
class MetricsRow:
    solver: str
    k_branches: int
    para_nfe: int
    nfe: int
    seed_count: int
    endpoint_error: float
    node_errors: list[float]

    def __post_init__(self):
        if self.endpoint_error < 0 or any(e < 0 for e in self.node_errors):
            raise ValueError("errors must be nonnegative")


def compute_trajectory_metrics(
    traj: Trajectory,
    reference: Trajectory,
    solver: str,
    k_branches: int = 1,
) -> MetricsRow:
    """Mean l2 endpoint error over seeds, plus per-node errors at shared nodes."""
    if traj.states.ndim != 3 or reference.states.ndim != 3:
        raise ValueError("metrics expect batched trajectories (nodes, seeds, dim)")
    if traj.states.shape[1] != reference.states.shape[1]:
        raise ValueError("trajectory and reference must cover the same seeds")
    node_errors = []
    ref_times = reference.times
    for i, t in enumerate(traj.times):
        j = np.flatnonzero(np.abs(ref_times - t) <= _NODE_MATCH_TOL)
        if j.size == 0:
            continue
        diff = traj.states[i] - reference.states[j[0]]
        node_errors.append(float(np.mean(np.linalg.norm(diff, axis=-1))))
    if np.abs(traj.times[-1] - ref_times[-1]) > _NODE_MATCH_TOL:
        raise ValueError("trajectory and reference endpoints do not match")
    return MetricsRow(
        solver=solver,
        k_branches=k_branches,
        para_nfe=traj.para_nfe,
        nfe=traj.nfe,
        seed_count=traj.states.shape[1],
        endpoint_error=node_errors[-1],
        node_errors=node_errors,
    )


@dataclass
class ExperimentConfig:
    """Grid definition for one comparison run."""

    model: GaussianMixture = field(default_factory=benchmark_mixture)
    schedule_kind: str = "polynomial"
    t_min: float = 0.002
    t_max: float = 80.0
    rho: float = 7.0
    solvers: tuple[str, ...] = ("ddim", "heun", "dpm2", "ipndm", "epd")
    k_list: tuple[int, ...] = (2,)
    budgets: tuple[int, ...] = (3, 5, 7, 9)
    afs: bool = True
    seeds: tuple[int, ...] = tuple(range(10_000, 10_256))
    traj_seeds: tuple[int, ...] = ()
    train: TrainConfig = field(default_factory=TrainConfig)
    reference_kind: str = "heun"
    reference_steps: int = 1024
    workers: int = 4
    bench_cost_ms: float = 10.0
    bench_reps: int = 10
    out_dir: str = "results"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("need at least one evaluation seed")
        for kind in self.solvers:
            if kind not in BASELINE_KINDS + EPD_KINDS:
                raise ValueError(f"unknown solver kind {kind!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            doc = json.load(fh)
        return cls.from_dict(doc, base_dir=Path(path).parent)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        doc = dict(doc)
        model_spec = doc.pop("model", None)
        if model_spec is None:
            model = benchmark_mixture()
        elif isinstance(model_spec, str):
            path = Path(model_spec)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            model = load_gmm(path)
        else:
            model = GaussianMixture(
                dim=int(model_spec["dim"]),
                weights=[c["weight"] for c in model_spec["components"]],
                means=[c["mean"] for c in model_spec["components"]],
                variances=[c["var"] for c in model_spec["components"]],
            )
        train_spec = doc.pop("train", {})
        bounds_spec = train_spec.pop("bounds", None)
        if bounds_spec is not None:
            train_spec["bounds"] = Bounds(**bounds_spec)
        if "betas" in train_spec:
            train_spec["betas"] = tuple(train_spec["betas"])
        for key in ("solvers", "k_list", "budgets", "seeds", "traj_seeds"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if "seed_range" in doc:
            lo, hi = doc.pop("seed_range")
            doc["seeds"] = tuple(range(lo, hi))
        return cls(model=model, train=TrainConfig(**train_spec), **doc)

    def schedule_for(self, n_steps: int) -> TimeSchedule:
        return build_schedule(self.schedule_kind, n_steps, self.t_min, self.t_max, self.rho)


def initial_states_for_seeds(seeds: Sequence[int], dim: int, t_max: float) -> np.ndarray:
    """One initial noise per seed, each from its own generator (order-free)."""
    return np.stack([
        np.random.default_rng(s).standard_normal(dim) * t_max for s in seeds
    ])


def reference_trajectory(
    oracle: Oracle,
    schedule: TimeSchedule,
    x_init: np.ndarray,
    kind: str = "heun",
    min_steps: int = 1024,
) -> Trajectory:
    """Fine reference run on a refinement of the student schedule.

    Refining (rather than re-gridding) keeps every student node in the
    reference trajectory, so per-node errors are defined everywhere.
    """
    m_inner = max(math.ceil(min_steps / schedule.n_steps) - 1, 0)
    fine = refine_for_teacher(schedule, m_inner)
    traj = run_sampler(kind, oracle, fine, x_init, afs=False)
    stride = m_inner + 1
    return Trajectory(
        times=traj.times[::stride],
        states=traj.states[::stride],
        nfe=traj.nfe,
        para_nfe=traj.para_nfe,
    )


def _train_for_row(config: ExperimentConfig, kind: str, n_steps: int, k: int,
                   executor: WorkerPool) -> EpdParams:
    row_cfg = dataclasses.replace(
        config.train,
        n_steps=n_steps,
        k_branches=k,
        schedule_kind=config.schedule_kind,
        t_min=config.t_min,
        t_max=config.t_max,
        rho=config.rho,
        afs=config.afs,
    )
    params, _ = train(row_cfg, config.model, executor, plugin=(kind == "epd-plugin"))
    return params


def _metrics_csv(rows: list[MetricsRow]) -> str:
    lines = ["solver,K,para_nfe,nfe,seed_count,endpoint_error,node_errors"]
    for r in rows:
        nodes = ";".join(repr(e) for e in r.node_errors)
        lines.append(
            f"{r.solver},{r.k_branches},{r.para_nfe},{r.nfe},{r.seed_count},"
            f"{r.endpoint_error!r},{nodes}"
        )
    return "\n".join(lines) + "\n"


def run_experiment(config: ExperimentConfig, executor: WorkerPool | None = None) -> dict:
    """Run the full comparison grid and write result files.

    Returns a summary dict with the metrics rows, per-row skip reasons for
    unachievable budgets, and the output paths.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    own_pool = executor is None
    pool = executor or WorkerPool(config.workers)
    rows: list[MetricsRow] = []
    skipped: list[dict] = []
    references: dict[int, Trajectory] = {}
    x_init = initial_states_for_seeds(config.seeds, config.model.dim, config.t_max)
    try:
        for kind in config.solvers:
            k_options = config.k_list if kind in EPD_KINDS else (1,)
            for k in k_options:
                for budget in config.budgets:
                    try:
                        n_steps = resolve_steps(kind, budget, config.afs)
                    except UnachievableBudget as exc:
                        skipped.append({"solver": kind, "K": k, "budget": budget, "reason": str(exc)})
                        continue
                    schedule = config.schedule_for(n_steps)
                    if n_steps not in references:
                        references[n_steps] = reference_trajectory(
                            config.model, schedule, x_init,
                            kind=config.reference_kind, min_steps=config.reference_steps,
                        )
                    if kind in EPD_KINDS:
                        params = _train_for_row(config, kind, n_steps, k, pool)
                        traj = run_epd(params, config.model, pool, schedule, x_init,
                                       plugin=(kind == "epd-plugin"))
                        label = f"{kind}-K{k}"
                    else:
                        traj = run_sampler(kind, config.model, schedule, x_init, afs=config.afs)
                        label = kind
                    rows.append(compute_trajectory_metrics(traj, references[n_steps], label, k))
                    for seed in config.traj_seeds:
                        if seed in config.seeds and config.model.dim == 2:
                            si = config.seeds.index(seed)
                            (out / f"traj_{label}_{seed}.csv").write_text(
                                trajectory_to_csv(traj, sample_index=si)
                            )
    finally:
        if own_pool:
            pool.shutdown()

    (out / "metrics.csv").write_text(_metrics_csv(rows))
    if config.bench_reps >= 2:
        costed = with_cost(config.model, int(config.bench_cost_ms * 1e6))
        report = bench_step_latency(
            costed,
            k_values=sorted(set((1,) + tuple(config.k_list))),
            workers=[1, config.workers],
            reps=config.bench_reps,
        )
        (out / "latency.csv").write_text(report.to_csv())
    return {"rows": rows, "skipped": skipped, "out_dir": str(out)}


# ---------------------------------------------------------------------------
# Fixture validation


@dataclass
class FixtureReport:
    path: str
    ok: bool
    violations: list[str]
    output_offsets: list[float]

    def summary(self) -> str:
        status = "ok" if self.ok else "INVALID"
        offs = ", ".join(f"{o:+.5f}" for o in self.output_offsets)
        head = f"{self.path}: {status} (per-step output offsets: {offs})"
        return head if self.ok else head + "\n  " + "\n  ".join(self.violations)


def validate_fixtures(paths: Sequence[str | Path]) -> list[FixtureReport]:
    """Check parameter files against their declared constraints.

    For constrained-mode files: per-step weight sums within 1e-4 of 1, ratios
    in [0, 1], both multipliers inside the file's declared bands, and the
    derived per-step output offset ``sum(lam * sigma) - 1`` inside the output
    band.  Raw-mode files satisfy the constraints by construction; their
    derived offsets are still reported.
    """
    from scipy.special import expit, softmax

    reports = []
    for path in paths:
        violations: list[str] = []
        offsets: list[float] = []
        with open(path) as fh:
            doc = json.load(fh)
        mode = doc.get("mode", "constrained")
        s_w = float(doc["bounds"]["s_width"])
        sig_w = float(doc["bounds"]["sig_width"])
        for i, step in enumerate(doc["steps"]):
            if mode == "raw":
                lams = softmax(np.array([float(b["lambda"]) for b in step]))
                sigs = 1.0 + sig_w * (expit(np.array([float(b["sigma"]) for b in step])) - 0.5)
            else:
                lams = np.array([float(b["lambda"]) for b in step])
                sigs = np.array([float(b["sigma"]) for b in step])
                if abs(lams.sum() - 1.0) > 1e-4:
                    violations.append(f"step {i}: weight sum {lams.sum()!r} violates the simplex")
                for j, b in enumerate(step):
                    r = float(b["r"])
                    s_val = float(b["s"])
                    sig_val = float(b["sigma"])
                    if not (0.0 <= r <= 1.0):
                        violations.append(f"step {i} branch {j}: ratio {r!r} outside [0, 1]")
                    if not (1 - s_w / 2 <= s_val <= 1 + s_w / 2):
                        violations.append(
                            f"step {i} branch {j}: time-shift multiplier {s_val!r} outside declared band"
                        )
                    if not (1 - sig_w / 2 <= sig_val <= 1 + sig_w / 2):
                        violations.append(
                            f"step {i} branch {j}: output multiplier {sig_val!r} outside declared band"
                        )
            offset = float(np.sum(lams * sigs) - 1.0)
            offsets.append(offset)
            if abs(offset) > sig_w / 2:
                violations.append(f"step {i}: output offset {offset!r} outside the declared band")
        reports.append(FixtureReport(
            path=str(path), ok=not violations, violations=violations, output_offsets=offsets,
        ))
    return reports
