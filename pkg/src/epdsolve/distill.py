"""Distillation training of the ensemble solver's branch parameters.

A fine teacher solver (run on a refined schedule) produces reference states at
every student node; the student's raw branch scalars are then optimized with
Adam, node by node from the first step to the endpoint, using central
finite-difference gradients.  The parameter set is tiny (4 scalars per branch
per step), so finite differences are both exact enough and cheap.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .epd import Bounds, BranchRaw, EpdParams, run_epd
from .gmm import Oracle, sample_initial
from .parallel import WorkerPool
from .schedules import TimeSchedule, build_schedule, refine_for_teacher
from .solvers import run_sampler

__all__ = [
    "TeacherSet",
    "TrainConfig",
    "TrainLog",
    "generate_teacher_set",
    "rollout_and_losses",
    "fd_gradient",
    "AdamState",
    "adam_step",
    "initial_params",
    "train",
]


@dataclass
class TeacherSet:
    """Reference states at student nodes, per sample.

    ``refs[i]`` is the teacher state at the i-th visited student node
    (``refs[0]`` equals the shared initial noise).
    """

    noises: np.ndarray
    refs: np.ndarray
    solver_kind: str
    m_inner: int

    def __post_init__(self):
        if self.refs.shape[1:] != self.noises.shape:
            raise ValueError("reference states must align with the noise batch")
        if not np.array_equal(self.refs[0], self.noises):
            raise ValueError("teacher references must start at the shared noises")

    @property
    def n_nodes(self) -> int:
        return self.refs.shape[0]


@dataclass
class TrainConfig:
    """Settings for one distillation run (desk-scale defaults)."""

    n_steps: int = 3
    k_branches: int = 2
    schedule_kind: str = "polynomial"
    t_min: float = 0.002
    t_max: float = 80.0
    rho: float = 7.0
    afs: bool = True
    m_inner: int = 6
    teacher_kind: str = "dpm2"
    sample_count: int = 1024
    batch_size: int = 32
    iterations: int = 400
    lr: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    fd_step: float = 1e-3
    seed: int = 0
    bounds: Bounds = field(default_factory=Bounds)
    patience: int = 10
    min_rel_improvement: float = 1e-4

    def __post_init__(self):
        if self.n_steps < 1 or self.k_branches < 1:
            raise ValueError("n_steps and k_branches must be >= 1")
        if self.sample_count < 1 or self.batch_size < 1 or self.iterations < 1:
            raise ValueError("sample_count, batch_size and iterations must be >= 1")
        if not (self.lr > 0 and self.fd_step > 0):
            raise ValueError("learning rate and fd_step must be > 0")
        if self.m_inner < 0:
            raise ValueError("m_inner must be >= 0")

    def schedule(self) -> TimeSchedule:
        return build_schedule(self.schedule_kind, self.n_steps, self.t_min, self.t_max, self.rho)


@dataclass
class TrainLog:
    """Per-(iteration, node) losses plus wall-clock bookkeeping."""

    records: list[dict] = field(default_factory=list)
    total_wall_s: float = 0.0
    stopped_early: bool = False

    def losses_at_node(self, node: int) -> np.ndarray:
        return np.array([r["loss"] for r in self.records if r["node"] == node])

    def to_csv(self) -> str:
        lines = ["iteration,node,loss,wall_ms"]
        for r in self.records:
            lines.append(f"{r['iteration']},{r['node']},{r['loss']!r},{r['wall_ms']:.3f}")
        return "\n".join(lines) + "\n"


def generate_teacher_set(
    oracle: Oracle,
    student_schedule: TimeSchedule,
    config: TrainConfig,
    rng: np.random.Generator,
    count: int | None = None,
) -> TeacherSet:
    """Run the teacher solver on the refined schedule and keep student nodes.

    The teacher never uses the analytic first step: it is the accuracy
    reference, not a budget-constrained sampler.
    """
    count = config.sample_count if count is None else count
    dim = _oracle_dim(oracle)
    noises = sample_initial(rng, student_schedule.t_max, dim, count)
    return teacher_refs_for(oracle, student_schedule, config.teacher_kind, config.m_inner, noises)


def teacher_refs_for(
    oracle: Oracle,
    student_schedule: TimeSchedule,
    teacher_kind: str,
    m_inner: int,
    noises: np.ndarray,
) -> TeacherSet:
    """Teacher references for an explicit batch of initial noises."""
    fine = refine_for_teacher(student_schedule, m_inner)
    traj = run_sampler(teacher_kind, oracle, fine, noises, afs=False)
    stride = m_inner + 1
    refs = traj.states[:: stride]
    return TeacherSet(noises=noises, refs=refs, solver_kind=teacher_kind, m_inner=m_inner)


def _oracle_dim(oracle) -> int:
    dim = getattr(oracle, "dim", None)
    if dim is None:
        raise ValueError("oracle must expose a .dim attribute to draw initial noise")
    return int(dim)


def _node_losses(
    student_states: np.ndarray,
    teacher: TeacherSet,
    feature_map: Callable[[np.ndarray], np.ndarray] | None,
) -> np.ndarray:
    """Mean squared l2 distance per node, for nodes after steps 1..N."""
    n = student_states.shape[0] - 1
    losses = np.empty(n)
    for i in range(1, n + 1):
        a, b = student_states[i], teacher.refs[i]
        if i == n and feature_map is not None:
            a, b = feature_map(a), feature_map(b)
        diff = a - b
        losses[i - 1] = float(np.mean(np.sum(diff * diff, axis=-1)))
    return losses


def rollout_and_losses(
    params: EpdParams,
    oracle: Oracle,
    executor: WorkerPool,
    schedule: TimeSchedule,
    teacher: TeacherSet,
    plugin: bool = False,
    feature_map: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Student rollout from the teacher noises; squared-l2 loss per node.

    Entry ``i`` is the loss at the node reached after ``i + 1`` steps; the
    start node is omitted (it is shared with the teacher by construction).
    """
    if teacher.n_nodes != schedule.n_steps + 1:
        raise ValueError("teacher references do not match the student schedule")
    traj = run_epd(params, oracle, executor, schedule, teacher.noises, plugin=plugin)
    return _node_losses(traj.states, teacher, feature_map)


def _loss_at_node(
    params: EpdParams,
    oracle: Oracle,
    executor: WorkerPool,
    schedule: TimeSchedule,
    teacher: TeacherSet,
    node: int,
    plugin: bool,
    feature_map,
) -> float:
    """Loss at one visitation node, rolling out only the prefix that feeds it."""
    from .epd import derive_step_params, epd_plugin_step, epd_step
    from .solvers import HistoryBuffer, afs_direction

    ts = schedule.descending()
    x = teacher.noises
    history = HistoryBuffer()
    for i in range(node):
        t_cur, t_nxt = ts[i], ts[i + 1]
        branches = derive_step_params(params.steps[i], params.bounds, t_cur, t_nxt)
        d0 = afs_direction(x, t_cur) if (params.afs and i == 0) else None
        if plugin:
            x, d_ens = epd_plugin_step(oracle, executor, x, t_cur, t_nxt, history, branches, d_override=d0)
            history.push(d_ens)
        else:
            x = epd_step(oracle, executor, x, t_cur, t_nxt, branches, d_override=d0)
    y = teacher.refs[node]
    if node == schedule.n_steps and feature_map is not None:
        x, y = feature_map(x), feature_map(y)
    diff = x - y
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def fd_gradient(
    loss_fn: Callable[[EpdParams], float],
    params: EpdParams,
    node: int,
    fd_step: float,
) -> np.ndarray:
    """Central-difference gradient of a node loss over the raw parameter vector.

    Parameters of steps that cannot influence the node (steps at or after it
    in visitation order) get an exact zero entry without being probed.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be > 0")
    vec = params.as_vector()
    grad = np.zeros_like(vec)
    active = node * params.k_branches * 4
    for j in range(active):
        probe = vec.copy()
        probe[j] = vec[j] + fd_step
        up = loss_fn(_rebuild(params, probe))
        probe[j] = vec[j] - fd_step
        down = loss_fn(_rebuild(params, probe))
        if not (np.isfinite(up) and np.isfinite(down)):
            raise RuntimeError(f"non-finite loss while probing raw parameter {j} at node {node}")
        grad[j] = (up - down) / (2.0 * fd_step)
    return grad


def _rebuild(params: EpdParams, vec: np.ndarray) -> EpdParams:
    return EpdParams.from_vector(
        vec, params.n_steps, params.k_branches, params.bounds,
        schedule_kind=params.schedule_kind, afs=params.afs,
    )


@dataclass
class AdamState:
    """First/second moment accumulators with per-parameter step counts."""

    m: np.ndarray
    v: np.ndarray
    steps: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), steps=np.zeros(size, dtype=int))


def adam_step(
    state: AdamState,
    theta: np.ndarray,
    grad: np.ndarray,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    active: slice | None = None,
) -> np.ndarray:
    """One bias-corrected Adam update, optionally restricted to a slice.

    Only the active slice's moments and step counts advance, so parameters
    outside it are left untouched (their accumulated state included).
    """
    b1, b2 = betas
    sl = slice(None) if active is None else active
    g = grad[sl]
    state.steps[sl] += 1
    state.m[sl] = b1 * state.m[sl] + (1.0 - b1) * g
    state.v[sl] = b2 * state.v[sl] + (1.0 - b2) * g * g
    t = state.steps[sl]
    m_hat = state.m[sl] / (1.0 - b1**t)
    v_hat = state.v[sl] / (1.0 - b2**t)
    out = theta.copy()
    out[sl] = theta[sl] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


def initial_params(config: TrainConfig) -> EpdParams:
    """Deterministic starting point with branch ratios spread over the step.

    Spreading ``r`` breaks the permutation symmetry between branches; all
    other raw scalars start at 0 (uniform weights, unit multipliers).
    """
    k = config.k_branches
    spread = [float(np.log((j + 1) / (k + 1)) - np.log(1 - (j + 1) / (k + 1))) for j in range(k)]
    steps = [
        [BranchRaw(r_raw=spread[j]) for j in range(k)]
        for _ in range(config.n_steps)
    ]
    return EpdParams(steps=steps, bounds=config.bounds,
                     schedule_kind=config.schedule_kind, afs=config.afs)


def train(
    config: TrainConfig,
    oracle: Oracle,
    executor: WorkerPool,
    plugin: bool = False,
    feature_map: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[EpdParams, TrainLog]:
    """Optimize branch parameters against a fine teacher.

    Per outer iteration: take the next noise batch, then for each node from
    the first step's output down to the endpoint, apply one Adam update to
    every raw parameter feeding that node (finite-difference gradient of the
    node loss, student prefix recomputed after each update).  Stops after the
    configured iterations or once the endpoint loss on a fixed probe batch
    has not improved by ``min_rel_improvement`` (relative) for ``patience``
    iterations.
    """
    t_start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    schedule = config.schedule()
    dim = _oracle_dim(oracle)
    pool_noises = sample_initial(rng, config.t_max, dim, config.sample_count)
    pool = teacher_refs_for(oracle, schedule, config.teacher_kind, config.m_inner, pool_noises)

    def batch_at(idx: np.ndarray) -> TeacherSet:
        return TeacherSet(
            noises=pool.noises[idx],
            refs=pool.refs[:, idx],
            solver_kind=pool.solver_kind,
            m_inner=pool.m_inner,
        )

    # fixed probe batch: a stable early-stopping signal across noisy batches
    probe = batch_at(np.arange(min(config.batch_size, config.sample_count)))

    params = initial_params(config)
    n, k = config.n_steps, config.k_branches
    adam = AdamState.zeros(n * k * 4)
    log = TrainLog()
    best_final = np.inf
    stall = 0

    for it in range(config.iterations):
        idx = np.arange(it * config.batch_size, (it + 1) * config.batch_size) % config.sample_count
        batch = batch_at(idx)
        for node in range(1, n + 1):
            t_node = time.perf_counter()

            def loss_fn(p: EpdParams, _node=node) -> float:
                return _loss_at_node(p, oracle, executor, schedule, batch, _node, plugin, feature_map)

            loss = loss_fn(params)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss {loss!r} at iteration {it}, node {n - node}"
                )
            grad = fd_gradient(loss_fn, params, node, config.fd_step)
            vec = adam_step(adam, params.as_vector(), grad, config.lr, config.betas,
                            config.adam_eps, active=slice(0, node * k * 4))
            params = _rebuild(params, vec)
            log.records.append({
                "iteration": it,
                "node": n - node,
                "loss": loss,
                "wall_ms": (time.perf_counter() - t_node) * 1e3,
            })
        probe_loss = _loss_at_node(params, oracle, executor, schedule, probe, n, plugin, feature_map)
        if probe_loss < best_final * (1.0 - config.min_rel_improvement):
            best_final = probe_loss
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                log.stopped_early = True
                break

    log.total_wall_s = time.perf_counter() - t_start
    return params, log
