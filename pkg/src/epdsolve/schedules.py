"""Sampling time schedules and teacher-schedule refinement.

Three families are supported, each defined by a warp of the time axis in
which grid points are placed uniformly:

- ``polynomial`` (exponent rho): uniform in ``t**(1/rho)``;
- ``time_uniform``: uniform in ``t`` (identical to polynomial with rho=1);
- ``logsnr``: uniform in ``log t`` (geometric spacing).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

__all__ = ["TimeSchedule", "build_schedule", "refine_for_teacher", "SCHEDULE_KINDS"]

SCHEDULE_KINDS = ("polynomial", "time_uniform", "logsnr")


@dataclass(frozen=True)
class TimeSchedule:
    """Ascending grid of sampling times, times[0]=t_min .. times[-1]=t_max."""

    kind: str
    times: np.ndarray
    t_min: float
    t_max: float
    rho: float = 7.0

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.times.ndim != 1 or self.times.size < 2:
            raise ValueError("a schedule needs at least two time points")
        if not (0 < self.t_min < self.t_max):
            raise ValueError("need 0 < t_min < t_max")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("schedule times must be strictly increasing")
        if np.any(self.times <= 0):
            raise ValueError("all schedule times must be > 0")
        if abs(self.times[0] - self.t_min) > 1e-12 or abs(self.times[-1] - self.t_max) > 1e-12:
            raise ValueError("schedule endpoints must equal t_min / t_max")

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def descending(self) -> np.ndarray:
        """Times in visitation order t_max .. t_min."""
        return self.times[::-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("index,t\n")
        for i, t in enumerate(self.times):
            buf.write(f"{i},{t!r}\n")
        return buf.getvalue()


def _warp(kind: str, t: np.ndarray, rho: float) -> np.ndarray:
    if kind == "polynomial":
        return t ** (1.0 / rho)
    if kind == "time_uniform":
        return t
    return np.log(t)


def _unwarp(kind: str, u: np.ndarray, rho: float) -> np.ndarray:
    if kind == "polynomial":
        return u ** rho
    if kind == "time_uniform":
        return u
    return np.exp(u)


def build_schedule(
    kind: str,
    n_steps: int,
    t_min: float = 0.002,
    t_max: float = 80.0,
    rho: float = 7.0,
) -> TimeSchedule:
    """Build an ``n_steps``-interval schedule of the given family.

    Grid points are uniform in the family's warp space; the endpoints are
    pinned to t_min / t_max exactly.
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not (0 < t_min < t_max):
        raise ValueError("need 0 < t_min < t_max")
    if kind == "polynomial" and not rho > 0:
        raise ValueError("rho must be > 0 for the polynomial family")
    frac = np.arange(n_steps + 1, dtype=float) / n_steps
    lo = _warp(kind, np.asarray(t_min, float), rho)
    hi = _warp(kind, np.asarray(t_max, float), rho)
    times = _unwarp(kind, lo + frac * (hi - lo), rho)
    times[0] = t_min
    times[-1] = t_max
    return TimeSchedule(kind=kind, times=times, t_min=t_min, t_max=t_max, rho=rho)


def refine_for_teacher(schedule: TimeSchedule, m_inner: int) -> TimeSchedule:
    """Insert ``m_inner`` extra points inside every interval of ``schedule``.

    Inserted points are uniform in the schedule family's warp space, so the
    result has ``n_steps * (m_inner + 1) + 1`` nodes and contains every
    original time exactly.  ``m_inner = 0`` returns the input unchanged.
    """
    if m_inner < 0:
        raise ValueError("m_inner must be >= 0")
    if m_inner == 0:
        return schedule
    pieces = []
    for a, b in zip(schedule.times[:-1], schedule.times[1:]):
        ua = _warp(schedule.kind, np.asarray(a, float), schedule.rho)
        ub = _warp(schedule.kind, np.asarray(b, float), schedule.rho)
        frac = np.arange(1, m_inner + 1, dtype=float) / (m_inner + 1)
        inner = _unwarp(schedule.kind, ua + frac * (ub - ua), schedule.rho)
        pieces.append(a)
        pieces.append(inner)
    times = np.concatenate([np.concatenate([np.atleast_1d(p) for p in pieces]), [schedule.times[-1]]])
    return TimeSchedule(
        kind=schedule.kind,
        times=times,
        t_min=schedule.t_min,
        t_max=schedule.t_max,
        rho=schedule.rho,
    )
