"""Input validation helpers shared by the estimator API."""

from __future__ import annotations

import numpy as np

__all__ = ["check_states", "check_positive"]


def check_states(X, dim: int | None = None) -> np.ndarray:
    """Coerce X to a finite float64 (n_samples, dim) array."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D array of states, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("states must be finite")
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"states have dimension {X.shape[1]}, expected {dim}")
    return X


def check_positive(name: str, value) -> float:
    value = float(value)
    if not value > 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    return value
