import numpy as np
import pytest

from epdsolve import GaussianMixture, WorkerPool, benchmark_mixture


@pytest.fixture(scope="session")
def pool():
    with WorkerPool(2) as p:
        yield p


@pytest.fixture(scope="session")
def wide_pool():
    with WorkerPool(4) as p:
        yield p


@pytest.fixture()
def unit_gaussian():
    return GaussianMixture(dim=2, weights=[1.0], means=[[0.0, 0.0]], variances=[[1.0, 1.0]])


@pytest.fixture()
def offset_gaussian():
    return GaussianMixture(dim=2, weights=[1.0], means=[[0.5, -0.3]], variances=[[1.0, 0.6]])


@pytest.fixture()
def mixture():
    return benchmark_mixture()


def random_mixture(rng: np.random.Generator, dim: int = 2, n_components: int = 3) -> GaussianMixture:
    w = rng.uniform(0.2, 1.0, n_components)
    return GaussianMixture(
        dim=dim,
        weights=w / w.sum(),
        means=rng.uniform(-3.0, 3.0, (n_components, dim)),
        variances=rng.uniform(0.2, 1.5, (n_components, dim)),
    )


def convergence_slope(errors, n_values) -> float:
    return float(-np.polyfit(np.log(n_values), np.log(errors), 1)[0])


class DepthCountingPool:
    """Executor wrapper counting dispatch batches (sequential-depth units)."""

    def __init__(self, inner: WorkerPool):
        self._inner = inner
        self.batches = 0
        self.requests = 0

    @property
    def workers(self):
        return self._inner.workers

    def map_eval(self, oracle, requests):
        self.batches += 1
        self.requests += len(requests)
        return self._inner.map_eval(oracle, requests)
