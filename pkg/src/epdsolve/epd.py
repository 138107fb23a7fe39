"""Ensemble parallel-direction solver step, parameterization, and parameter I/O.

Each sampling step carries K branches.  Branch k evaluates the oracle at an
intermediate state reached by an Euler probe from the step's start point;
the K gradients are combined with simplex weights.  Four raw scalars per
branch parameterize, through squashing maps, the intermediate time (geometric
interpolation ratio), the combination weight (softmax), a small multiplicative
shift of the evaluation time, and a small output modulation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, softmax

from .gmm import Oracle
from .parallel import EvalRequest, WorkerPool, par_map_eval
from .solvers import HistoryBuffer, IPNDM_COEFFS, Trajectory, afs_direction

__all__ = [
    "Bounds",
    "BranchRaw",
    "DerivedBranch",
    "EpdParams",
    "derive_step_params",
    "epd_step",
    "epd_plugin_step",
    "run_epd",
    "save_params",
    "load_params",
    "fixture_dir",
    "fixture_paths",
]

_SIMPLEX_TOL = 1e-4  # parameter tables are printed with 5 decimals


@dataclass(frozen=True)
class Bounds:
    """Widths of the sigmoid-constrained bands around 1 for the two multipliers."""

    s_width: float = 0.1
    sig_width: float = 0.1

    def __post_init__(self):
        if not (self.s_width > 0 and self.sig_width > 0):
            raise ValueError("bound widths must be > 0")


@dataclass
class BranchRaw:
    """Unconstrained scalars for one branch (pre-squashing)."""

    r_raw: float = 0.0
    lam_raw: float = 0.0
    s_raw: float = 0.0
    sig_raw: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.r_raw, self.lam_raw, self.s_raw, self.sig_raw], dtype=float)


@dataclass(frozen=True)
class DerivedBranch:
    """Constrained per-branch quantities actually used by the step.

    ``tau`` is the intermediate evaluation time, ``lam`` the simplex weight,
    ``s_mult``/``sig_mult`` the time-shift and output multipliers, and
    ``delta = (s_mult - 1) * tau`` the additive form of the time shift.
    """

    tau: float
    lam: float
    s_mult: float
    sig_mult: float
    delta: float


@dataclass
class EpdParams:
    """Raw branch parameters for every step of an N-step sampler.

    ``steps[i]`` holds the K branches of the i-th step executed (the step
    leaving t_max first).  Branch count is uniform across steps.
    """

    steps: list[list[BranchRaw]]
    bounds: Bounds = field(default_factory=Bounds)
    schedule_kind: str | None = None
    afs: bool = False

    def __post_init__(self):
        if not self.steps:
            raise ValueError("need at least one step")
        k = len(self.steps[0])
        if k < 1 or any(len(s) != k for s in self.steps):
            raise ValueError("branch count must be uniform and >= 1 across steps")

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def k_branches(self) -> int:
        return len(self.steps[0])

    def as_vector(self) -> np.ndarray:
        """Flatten to shape (n_steps * K * 4,), step-major then branch-major."""
        return np.concatenate([b.as_array() for s in self.steps for b in s])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_steps: int, k: int, bounds: Bounds,
                    schedule_kind: str | None = None, afs: bool = False) -> "EpdParams":
        vec = np.asarray(vec, dtype=float).reshape(n_steps, k, 4)
        steps = [[BranchRaw(*vec[i, j]) for j in range(k)] for i in range(n_steps)]
        return cls(steps=steps, bounds=bounds, schedule_kind=schedule_kind, afs=afs)


def derive_step_params(
    raw: Sequence[BranchRaw],
    bounds: Bounds,
    t_cur: float,
    t_nxt: float,
) -> list[DerivedBranch]:
    """Squash one step's raw branch scalars into their constrained form.

    ``t_cur`` is the step's start time and ``t_nxt`` its (smaller) target
    time.  The intermediate time interpolates geometrically,
    ``tau = t_cur**r * t_nxt**(1-r)`` with ``r = sigmoid(r_raw)``, so ``r=1``
    recovers the start point and ``r=0.5`` the geometric mean.  Weights are a
    softmax across the step's branches; the two multipliers are sigmoid-mapped
    into bands of the configured widths centered at 1.
    """
    if not (0 < t_nxt < t_cur):
        raise ValueError(f"degenerate step interval: need 0 < t_nxt < t_cur, got {t_cur!r} -> {t_nxt!r}")
    lams = softmax(np.array([b.lam_raw for b in raw], dtype=float))
    out = []
    for b, lam in zip(raw, lams):
        r = float(expit(b.r_raw))
        tau = float(t_cur**r * t_nxt ** (1.0 - r))
        s_mult = 1.0 + bounds.s_width * (float(expit(b.s_raw)) - 0.5)
        sig_mult = 1.0 + bounds.sig_width * (float(expit(b.sig_raw)) - 0.5)
        out.append(DerivedBranch(tau=tau, lam=float(lam), s_mult=s_mult,
                                 sig_mult=sig_mult, delta=(s_mult - 1.0) * tau))
    return out


def output_scale_offset(branches: Sequence[DerivedBranch]) -> float:
    """Diagnostic aggregate offset: sum(lam * sig_mult) - 1 over a step."""
    return float(sum(b.lam * b.sig_mult for b in branches) - 1.0)


def _branch_gradients(
    oracle: Oracle,
    executor: WorkerPool,
    x: np.ndarray,
    t_cur: float,
    d0: np.ndarray,
    branches: Sequence[DerivedBranch],
) -> list[np.ndarray]:
    """Euler-probe each branch state and evaluate all branches concurrently."""
    requests = [
        EvalRequest(state=x + (b.tau - t_cur) * d0, time=b.tau + b.delta, branch=k)
        for k, b in enumerate(branches)
    ]
    return par_map_eval(executor, oracle, requests)


def _combine(grads: Sequence[np.ndarray], branches: Sequence[DerivedBranch]) -> np.ndarray:
    # fixed ascending-branch accumulation keeps results independent of workers
    total = branches[0].lam * branches[0].sig_mult * grads[0]
    for g, b in zip(grads[1:], branches[1:]):
        total = total + b.lam * b.sig_mult * g
    return total


def epd_step(
    oracle: Oracle,
    executor: WorkerPool,
    x,
    t_cur: float,
    t_nxt: float,
    branches: Sequence[DerivedBranch],
    d_override=None,
):
    """One ensemble step: K concurrent intermediate gradients, simplex-combined.

    Sequential depth is two oracle evaluations (one when the start gradient is
    supplied), regardless of K.
    """
    x = np.asarray(x, dtype=float)
    d0 = oracle(x, t_cur) if d_override is None else np.asarray(d_override, dtype=float)
    grads = _branch_gradients(oracle, executor, x, t_cur, d0, branches)
    return x + (t_nxt - t_cur) * _combine(grads, branches)


def epd_plugin_step(
    oracle: Oracle,
    executor: WorkerPool,
    x,
    t_cur: float,
    t_nxt: float,
    history: HistoryBuffer,
    branches: Sequence[DerivedBranch],
    d_override=None,
):
    """Multistep update whose current-gradient slot holds the branch ensemble.

    Returns ``(x_new, d_ens)``; the caller pushes ``d_ens`` into the history
    buffer so later steps extrapolate from the ensemble gradients.
    """
    x = np.asarray(x, dtype=float)
    d0 = oracle(x, t_cur) if d_override is None else np.asarray(d_override, dtype=float)
    grads = _branch_gradients(oracle, executor, x, t_cur, d0, branches)
    d_ens = _combine(grads, branches)
    coeffs = IPNDM_COEFFS[min(len(history), 3)]
    d_comb = coeffs[0] * d_ens
    for c, d_old in zip(coeffs[1:], history.items()):
        d_comb = d_comb + c * d_old
    return x + (t_nxt - t_cur) * d_comb, d_ens


def run_epd(
    params: EpdParams,
    oracle: Oracle,
    executor: WorkerPool,
    schedule,
    x_init,
    plugin: bool = False,
    afs_variant: str = "normalized",
) -> Trajectory:
    """Run the ensemble solver (or its multistep plugin form) over a schedule.

    Evaluation accounting: every step issues one start evaluation plus K
    branch evaluations (``nfe``), but the branches run concurrently so the
    sequential depth (``para_nfe``) is 2 per step; the analytic first step
    removes one start evaluation when ``params.afs`` is set.
    """
    ts = schedule.descending()
    n = ts.size - 1
    if n != params.n_steps:
        raise ValueError(f"schedule has {n} steps but parameters cover {params.n_steps}")
    k = params.k_branches
    x = np.asarray(x_init, dtype=float)
    states = [x]
    history = HistoryBuffer()
    for i, (t_cur, t_nxt) in enumerate(zip(ts[:-1], ts[1:])):
        branches = derive_step_params(params.steps[i], params.bounds, t_cur, t_nxt)
        d0 = afs_direction(x, t_cur, afs_variant) if (params.afs and i == 0) else None
        if plugin:
            x, d_ens = epd_plugin_step(oracle, executor, x, t_cur, t_nxt, history, branches, d_override=d0)
            history.push(d_ens)
        else:
            x = epd_step(oracle, executor, x, t_cur, t_nxt, branches, d_override=d0)
        states.append(x)
    afs_saving = 1 if params.afs else 0
    return Trajectory(
        times=ts,
        states=np.stack(states),
        nfe=n * (1 + k) - afs_saving,
        para_nfe=2 * n - afs_saving,
    )


# ---------------------------------------------------------------------------
# Parameter files.
#
# Schema: {"K": int, "mode": "raw"|"constrained",
#          "bounds": {"s_width": w, "sig_width": w},
#          "schedule": str|null, "afs": bool,
#          "steps": [[{"r":..,"s":..,"sigma":..,"lambda":..} x K] x N]}
# Steps are listed in execution order (the step leaving t_max first).  In raw
# mode the four fields hold the unconstrained scalars; in constrained mode
# they hold the squashed values as printed in parameter tables, which the
# loader inverts back to raw form.

def save_params(params: EpdParams, path: str | Path) -> None:
    """Write parameters as a raw-mode JSON document (round-trip exact)."""
    doc = {
        "K": params.k_branches,
        "mode": "raw",
        "bounds": {"s_width": params.bounds.s_width, "sig_width": params.bounds.sig_width},
        "schedule": params.schedule_kind,
        "afs": params.afs,
        "steps": [
            [
                {"r": b.r_raw, "s": b.s_raw, "sigma": b.sig_raw, "lambda": b.lam_raw}
                for b in step
            ]
            for step in params.steps
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _logit(p: float, what: str) -> float:
    if not (0.0 < p < 1.0):
        raise ValueError(f"{what} = {p!r} cannot be inverted: must lie strictly inside (0, 1)")
    return float(np.log(p) - np.log1p(-p))


def _invert_band(value: float, width: float, what: str) -> float:
    """Invert v = 1 + width*(sigmoid(raw) - 0.5) back to raw."""
    frac = (value - 1.0) / width + 0.5
    if not (0.0 < frac < 1.0):
        lo, hi = 1.0 - width / 2.0, 1.0 + width / 2.0
        raise ValueError(f"{what} = {value!r} outside the declared band ({lo!r}, {hi!r})")
    return _logit(frac, what)


def load_params(path: str | Path) -> EpdParams:
    """Load a parameter file written in raw or constrained mode.

    Constrained-mode validation: interpolation ratios must lie in [0, 1],
    each step's weights must sum to 1 within 1e-4 (table rounding), and the
    multipliers must be positive and representable inside the file's declared
    bands.
    """
    with open(path) as fh:
        doc = json.load(fh)
    try:
        k = int(doc["K"])
        mode = doc["mode"]
        bounds = Bounds(float(doc["bounds"]["s_width"]), float(doc["bounds"]["sig_width"]))
        raw_steps = doc["steps"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed parameter file {path}: {exc}") from exc
    if mode not in ("raw", "constrained"):
        raise ValueError(f"unknown parameter mode {mode!r}")
    if any(len(step) != k for step in raw_steps):
        raise ValueError(f"every step must have exactly K={k} branches")

    steps: list[list[BranchRaw]] = []
    for i, step in enumerate(raw_steps):
        if mode == "raw":
            steps.append([
                BranchRaw(r_raw=float(b["r"]), lam_raw=float(b["lambda"]),
                          s_raw=float(b["s"]), sig_raw=float(b["sigma"]))
                for b in step
            ])
            continue
        lams = [float(b["lambda"]) for b in step]
        if abs(sum(lams) - 1.0) > _SIMPLEX_TOL:
            raise ValueError(
                f"step {i}: weights sum to {sum(lams)!r}, violating the simplex within {_SIMPLEX_TOL}"
            )
        branches = []
        for j, b in enumerate(step):
            r = float(b["r"])
            if not (0.0 <= r <= 1.0):
                raise ValueError(f"step {i} branch {j}: interpolation ratio {r!r} outside [0, 1]")
            s_val = float(b["s"])
            sig_val = float(b["sigma"])
            if s_val <= 0 or sig_val <= 0:
                raise ValueError(f"step {i} branch {j}: multipliers must be > 0")
            lam = min(max(lams[j], 1e-300), 1.0)
            branches.append(BranchRaw(
                r_raw=_logit(min(max(r, 1e-12), 1.0 - 1e-12), f"step {i} branch {j} ratio"),
                lam_raw=float(np.log(lam)),
                s_raw=_invert_band(s_val, bounds.s_width, f"step {i} branch {j} time-shift multiplier"),
                sig_raw=_invert_band(sig_val, bounds.sig_width, f"step {i} branch {j} output multiplier"),
            ))
        steps.append(branches)
    return EpdParams(
        steps=steps,
        bounds=bounds,
        schedule_kind=doc.get("schedule"),
        afs=bool(doc.get("afs", False)),
    )


def fixture_dir() -> Path:
    """Directory of the parameter sets distributed with the package."""
    return Path(resources.files("epdsolve") / "fixtures")


def fixture_paths() -> list[Path]:
    """All distributed parameter files, sorted by name."""
    return sorted(fixture_dir().glob("*.json"))
