"""Training-free baseline sampling steps and the trajectory runner.

All steps advance a state from the current time ``t_cur`` to the next,
smaller time ``t_nxt`` (so the signed step ``h = t_nxt - t_cur`` is negative
during sampling).  Oracles are callables ``(x, t) -> eps`` vectorized over
leading axes of ``x``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .gmm import Oracle

__all__ = [
    "Trajectory",
    "HistoryBuffer",
    "euler_step",
    "heun_step",
    "dpm2_step",
    "ipndm_step",
    "IPNDM_COEFFS",
    "afs_direction",
    "run_sampler",
    "trajectory_to_csv",
    "BASELINE_KINDS",
]

BASELINE_KINDS = ("ddim", "heun", "dpm2", "ipndm")

# Adams-Bashforth style weights used by the multistep solver, keyed by the
# number of available history gradients (newest first).
IPNDM_COEFFS = {
    0: (1.0,),
    1: (3.0 / 2.0, -1.0 / 2.0),
    2: (23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0),
    3: (55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0),
}


@dataclass
class Trajectory:
    """States visited while sampling, in visitation order t_max .. t_min.

    ``states[i]`` is the state at ``times[i]``; both leading entries are the
    initial noise.  ``nfe`` counts oracle evaluations issued; ``para_nfe``
    counts sequential depth (independent evaluations within one step count
    once).
    """

    times: np.ndarray
    states: np.ndarray
    nfe: int
    para_nfe: int

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape[0] != self.times.size:
            raise ValueError("states and times must have matching lengths")
        if self.para_nfe > self.nfe:
            raise ValueError("para_nfe cannot exceed nfe")

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]


class HistoryBuffer:
    """Up to three previous gradients, most recent first."""

    def __init__(self, maxlen: int = 3):
        self._buf: deque = deque(maxlen=maxlen)

    def push(self, d: np.ndarray) -> None:
        self._buf.appendleft(np.asarray(d, dtype=float))

    def items(self) -> list[np.ndarray]:
        return list(self._buf)

    def __len__(self) -> int:
        return len(self._buf)


def euler_step(oracle: Oracle, x, t_cur: float, t_nxt: float, d_override=None):
    """Rectangle rule: one gradient at the start point.

    Returns ``(x_new, d_used)`` so callers can reuse the start gradient.
    """
    d = oracle(x, t_cur) if d_override is None else np.asarray(d_override, dtype=float)
    return x + (t_nxt - t_cur) * d, d


def heun_step(oracle: Oracle, x, t_cur: float, t_nxt: float, d_override=None):
    """Trapezoidal rule: average of start and Euler-predicted end gradients."""
    h = t_nxt - t_cur
    d_start = oracle(x, t_cur) if d_override is None else np.asarray(d_override, dtype=float)
    x_pred = x + h * d_start
    d_end = oracle(x_pred, t_nxt)
    return x + 0.5 * h * (d_start + d_end)


def dpm2_step(oracle: Oracle, x, t_cur: float, t_nxt: float, d_override=None):
    """Midpoint rule with the geometric-mean intermediate time."""
    h = t_nxt - t_cur
    s = np.sqrt(t_cur * t_nxt)
    d_start = oracle(x, t_cur) if d_override is None else np.asarray(d_override, dtype=float)
    x_mid = x + (s - t_cur) * d_start
    return x + h * oracle(x_mid, s)


def ipndm_step(
    oracle: Oracle,
    x,
    t_cur: float,
    t_nxt: float,
    history: HistoryBuffer,
    d_override=None,
):
    """Multistep update combining the current gradient with up to three
    history gradients; warm-up orders follow the standard Adams-Bashforth
    weights.  Returns ``(x_new, d_cur)``; the caller pushes ``d_cur`` into
    the history buffer.
    """
    d_cur = oracle(x, t_cur) if d_override is None else np.asarray(d_override, dtype=float)
    coeffs = IPNDM_COEFFS[min(len(history), 3)]
    d_comb = coeffs[0] * d_cur
    for c, d_old in zip(coeffs[1:], history.items()):
        d_comb = d_comb + c * d_old
    return x + (t_nxt - t_cur) * d_comb, d_cur


def afs_direction(x, t_start: float, variant: str = "normalized") -> np.ndarray:
    """Analytic direction replacing the first gradient evaluation.

    ``normalized`` (default) is ``x / sqrt(1 + t^2)``, asymptotically exact
    for unit-variance data at large t; ``x_over_t`` and ``raw`` are the
    literal alternatives.
    """
    x = np.asarray(x, dtype=float)
    if variant == "normalized":
        return x / np.sqrt(1.0 + t_start * t_start)
    if variant == "x_over_t":
        return x / t_start
    if variant == "raw":
        return x.copy()
    raise ValueError(f"unknown AFS variant {variant!r}")


def _evals_per_step(kind: str) -> int:
    return 2 if kind in ("heun", "dpm2") else 1


def run_sampler(
    kind: str,
    oracle: Oracle,
    schedule,
    x_init,
    afs: bool = False,
    afs_variant: str = "normalized",
) -> Trajectory:
    """Run a baseline solver over the whole schedule.

    Args:
        kind: one of ``ddim``, ``heun``, ``dpm2``, ``ipndm``.
        oracle: noise-prediction callable.
        schedule: ``TimeSchedule``; visited from t_max down to t_min.
        x_init: starting state(s) at t_max, shape (..., dim).
        afs: replace the first step's start gradient with the analytic
            direction, saving one evaluation.
    Returns:
        ``Trajectory`` with per-node states and evaluation accounting.
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown solver kind {kind!r}")
    ts = schedule.descending()
    if ts.size < 2:
        raise ValueError("schedule too short: need at least one step")
    x = np.asarray(x_init, dtype=float)
    states = [x]
    history = HistoryBuffer()
    nfe = 0
    for i, (t_cur, t_nxt) in enumerate(zip(ts[:-1], ts[1:])):
        d0 = afs_direction(x, t_cur, afs_variant) if (afs and i == 0) else None
        if kind == "ddim":
            x, _ = euler_step(oracle, x, t_cur, t_nxt, d_override=d0)
        elif kind == "heun":
            x = heun_step(oracle, x, t_cur, t_nxt, d_override=d0)
        elif kind == "dpm2":
            x = dpm2_step(oracle, x, t_cur, t_nxt, d_override=d0)
        else:
            x, d_cur = ipndm_step(oracle, x, t_cur, t_nxt, history, d_override=d0)
            history.push(d_cur)
        nfe += _evals_per_step(kind) - (1 if d0 is not None else 0)
        states.append(x)
    # baselines have no intra-step parallelism: sequential depth equals nfe
    return Trajectory(times=ts, states=np.stack(states), nfe=nfe, para_nfe=nfe)


def trajectory_to_csv(traj: Trajectory, sample_index: int | None = None) -> str:
    """Render one trajectory as CSV with columns step_index, t, x0..x{d-1}.

    For batched trajectories pass ``sample_index`` to select one sample.
    """
    states = traj.states
    if states.ndim == 3:
        if sample_index is None:
            raise ValueError("batched trajectory: sample_index required")
        states = states[:, sample_index, :]
    dim = states.shape[-1]
    lines = ["step_index,t," + ",".join(f"x{j}" for j in range(dim))]
    for i, (t, row) in enumerate(zip(traj.times, states)):
        lines.append(f"{i},{t!r}," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
