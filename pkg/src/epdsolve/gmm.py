"""Analytic noise-prediction oracles for diagonal-covariance Gaussian mixtures.

For data drawn from a Gaussian mixture, the density diffused with isotropic
noise of scale ``t`` stays a Gaussian mixture with component covariances
``diag(v_i) + t^2 I``.  Its score (and hence the ideal noise predictor
``eps(x, t) = -t * grad_x log p(x; t)``) is available in closed form, so every
sampler in this package can be checked against exact reference flows instead
of a trained network.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "GaussianMixture",
    "noise_prediction",
    "score",
    "closed_form_flow",
    "sample_initial",
    "with_cost",
    "CountingOracle",
    "load_gmm",
    "benchmark_mixture",
]

# Oracle protocol used throughout the package: callable (x, t) -> eps,
# vectorized over leading axes of x.
Oracle = Callable[[np.ndarray, float], np.ndarray]

_WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class GaussianMixture:
    """Diagonal-covariance Gaussian mixture with an exact noise predictor.

    Parameters
    ----------
    dim : dimensionality of the data space.
    weights : mixture weights, positive, summing to 1 within 1e-12.
    means : component means, shape (n_components, dim).
    variances : diagonal covariance entries, shape (n_components, dim), all > 0.
    """

    dim: int
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, dtype=float)))
        object.__setattr__(self, "variances", np.atleast_2d(np.asarray(self.variances, dtype=float)))
        if self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        if self.weights.ndim != 1 or self.weights.size == 0:
            raise ValueError("weights must be a non-empty 1-D sequence")
        if np.any(self.weights <= 0):
            raise ValueError("all mixture weights must be > 0")
        if abs(self.weights.sum() - 1.0) > _WEIGHT_SUM_TOL:
            raise ValueError(f"mixture weights must sum to 1 within {_WEIGHT_SUM_TOL}, got {self.weights.sum()!r}")
        k = self.weights.size
        if self.means.shape != (k, self.dim):
            raise ValueError(f"means must have shape ({k}, {self.dim}), got {self.means.shape}")
        if self.variances.shape != (k, self.dim):
            raise ValueError(f"variances must have shape ({k}, {self.dim}), got {self.variances.shape}")
        if np.any(self.variances <= 0):
            raise ValueError("all variance entries must be > 0")

    @property
    def n_components(self) -> int:
        return self.weights.size

    def _check_xt(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"state has dimension {x.shape[-1]}, model expects {self.dim}")
        if not t > 0:
            raise ValueError(f"time must be > 0, got {t!r}")
        return x

    def _responsibilities(self, x: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Posterior component weights gamma_i(x, t) and per-component precisions.

        Component log-densities are combined through log-sum-exp so the result
        stays finite even when ``|x|`` or ``t`` spans several orders of magnitude.
        """
        denom = self.variances + t * t                        # (K, d)
        diff = x[..., None, :] - self.means                   # (..., K, d)
        logcomp = np.log(self.weights) - 0.5 * np.sum(
            diff * diff / denom + np.log(2.0 * np.pi * denom), axis=-1
        )                                                     # (..., K)
        gamma = np.exp(logcomp - logsumexp(logcomp, axis=-1, keepdims=True))
        return gamma, denom

    def log_density(self, x: np.ndarray, t: float) -> np.ndarray:
        """Log of the noise-diffused mixture density at scale t."""
        x = self._check_xt(x, t)
        denom = self.variances + t * t
        diff = x[..., None, :] - self.means
        logcomp = np.log(self.weights) - 0.5 * np.sum(
            diff * diff / denom + np.log(2.0 * np.pi * denom), axis=-1
        )
        return logsumexp(logcomp, axis=-1)

    def score(self, x: np.ndarray, t: float) -> np.ndarray:
        """Gradient of the diffused log-density with respect to x."""
        x = self._check_xt(x, t)
        gamma, denom = self._responsibilities(x, t)
        return np.sum(gamma[..., None] * (self.means - x[..., None, :]) / denom, axis=-2)

    def eps(self, x: np.ndarray, t: float) -> np.ndarray:
        """Ideal noise prediction, ``-t`` times the score."""
        return -t * self.score(x, t)

    # mixtures act as oracles directly: model(x, t) -> eps
    __call__ = eps


def noise_prediction(model: GaussianMixture, x: np.ndarray, t: float) -> np.ndarray:
    """Exact noise prediction for a Gaussian mixture at state x and scale t."""
    return model.eps(x, t)


def score(model: GaussianMixture, x: np.ndarray, t: float) -> np.ndarray:
    """Exact score of the diffused mixture density."""
    return model.score(x, t)


def closed_form_flow(
    mean: Sequence[float],
    var: Sequence[float],
    x: np.ndarray,
    t_from: float,
    t_to: float,
) -> np.ndarray:
    """Exact transport of x along the sampling flow of one Gaussian component.

    For a single Gaussian the flow ODE ``dx/dt = eps(x, t)`` is linear and
    solves to ``mean + (x - mean) * sqrt((var + t_to^2) / (var + t_from^2))``
    elementwise.  Used as the independent reference in solver tests.
    """
    if not (t_from > 0 and t_to > 0):
        raise ValueError("closed_form_flow requires strictly positive times")
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    x = np.asarray(x, dtype=float)
    scale = np.sqrt((var + t_to * t_to) / (var + t_from * t_from))
    return mean + (x - mean) * scale


def sample_initial(rng: np.random.Generator, t_max: float, dim: int, count: int) -> np.ndarray:
    """Draw ``count`` starting states from N(0, t_max^2 I) as a (count, dim) array."""
    if not t_max > 0:
        raise ValueError("t_max must be > 0")
    if count < 0:
        raise ValueError("count must be >= 0")
    return rng.standard_normal((count, dim)) * t_max


def with_cost(oracle: Oracle | GaussianMixture, cost_ns: int) -> Oracle:
    """Wrap an oracle so each call takes at least ``cost_ns`` wall time.

    Outputs are bit-identical to the wrapped oracle's.  The delay loop yields
    the interpreter between clock polls, so concurrently dispatched calls
    genuinely overlap; this emulates an expensive denoiser for latency
    benchmarks.
    """
    if cost_ns < 0:
        raise ValueError("cost_ns must be >= 0")
    base = oracle.eps if isinstance(oracle, GaussianMixture) else oracle

    def costed(x: np.ndarray, t: float) -> np.ndarray:
        deadline = time.perf_counter_ns() + cost_ns
        out = base(x, t)
        while time.perf_counter_ns() < deadline:
            time.sleep(0)
        return out

    dim = getattr(oracle, "dim", None)
    if dim is not None:
        costed.dim = dim
    return costed


class CountingOracle:
    """Oracle wrapper that counts evaluation calls (one per call, any batch size)."""

    def __init__(self, oracle: Oracle | GaussianMixture):
        self._base = oracle.eps if isinstance(oracle, GaussianMixture) else oracle
        self.calls = 0
        dim = getattr(oracle, "dim", None)
        if dim is not None:
            self.dim = dim

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        self.calls += 1
        return self._base(x, t)

    def reset(self) -> None:
        self.calls = 0


def load_gmm(path: str | Path) -> GaussianMixture:
    """Load a mixture from a JSON document.

    Expected schema::

        {"dim": 2, "components": [{"weight": w, "mean": [...], "var": [...]}, ...]}
    """
    with open(path) as fh:
        doc = json.load(fh)
    try:
        dim = int(doc["dim"])
        comps = doc["components"]
        weights = [c["weight"] for c in comps]
        means = [c["mean"] for c in comps]
        variances = [c["var"] for c in comps]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed mixture file {path}: {exc}") from exc
    return GaussianMixture(dim=dim, weights=weights, means=means, variances=variances)


def save_gmm(model: GaussianMixture, path: str | Path) -> None:
    doc = {
        "dim": model.dim,
        "components": [
            {"weight": float(w), "mean": list(map(float, m)), "var": list(map(float, v))}
            for w, m, v in zip(model.weights, model.means, model.variances)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def benchmark_mixture() -> GaussianMixture:
    """Default 2-D, 3-component mixture used by tests and the experiment harness.

    Well-separated sharp anisotropic modes with unequal weights make the
    sampling flow curved enough that few-step solvers show meaningful
    truncation error, while a fine teacher still resolves it accurately.
    """
    return GaussianMixture(
        dim=2,
        weights=[0.5, 0.3, 0.2],
        means=[[-4.0, -2.0], [3.5, -1.0], [0.5, 4.0]],
        variances=[[0.18, 0.05], [0.06, 0.22], [0.10, 0.10]],
    )
