"""Scikit-learn style wrappers around the samplers.

Both estimators view sampling as a transform from initial noise states (rows
of X, drawn at the schedule's largest time) to data-space samples.  They
follow the usual conventions: constructor arguments are stored verbatim,
fitted state lives in trailing-underscore attributes, and ``get_params`` /
``set_params`` work with :func:`sklearn.base.clone`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .distill import TrainConfig, train
from .epd import Bounds, run_epd
from .gmm import GaussianMixture, sample_initial
from .parallel import WorkerPool
from .schedules import build_schedule
from .solvers import run_sampler
from .validation import check_positive, check_states

__all__ = ["BaselineSampler", "EpdSampler"]


class BaselineSampler(BaseEstimator, TransformerMixin):
    """Training-free ODE sampler with a transform-shaped interface.

    Parameters
    ----------
    model : GaussianMixture
        Analytic noise-prediction oracle.
    kind : {"ddim", "heun", "dpm2", "ipndm"}
    num_steps : int
        Number of solver steps.
    schedule : {"time_uniform", "polynomial", "logsnr"}
    t_min, t_max, rho : schedule parameters.
    afs : bool
        Use the analytic first step (saves one evaluation).
    """

    def __init__(self, model: GaussianMixture | None = None, kind: str = "heun",
                 num_steps: int = 8, schedule: str = "polynomial",
                 t_min: float = 0.002, t_max: float = 80.0, rho: float = 7.0,
                 afs: bool = False):
        self.model = model
        self.kind = kind
        self.num_steps = num_steps
        self.schedule = schedule
        self.t_min = t_min
        self.t_max = t_max
        self.rho = rho
        self.afs = afs

    def _schedule(self):
        check_positive("t_min", self.t_min)
        check_positive("t_max", self.t_max)
        return build_schedule(self.schedule, self.num_steps, self.t_min, self.t_max, self.rho)

    def fit(self, X=None, y=None):
        """Stateless: validates the configuration and returns self."""
        if self.model is None:
            raise ValueError("model must be provided")
        self.schedule_ = self._schedule()
        return self

    def transform(self, X) -> np.ndarray:
        """Map initial noise states (rows of X) to data-space samples."""
        if not hasattr(self, "schedule_"):
            raise NotFittedError("call fit before transform")
        X = check_states(X, dim=self.model.dim)
        traj = run_sampler(self.kind, self.model, self.schedule_, X, afs=self.afs)
        return traj.endpoint

    def sample(self, count: int, seed: int = 0) -> np.ndarray:
        """Draw ``count`` initial noises and transform them."""
        rng = np.random.default_rng(seed)
        return self.transform(sample_initial(rng, self.t_max, self.model.dim, count))


class EpdSampler(BaseEstimator, TransformerMixin):
    """Trainable ensemble sampler: fit distills the branch parameters.

    ``fit`` runs the distillation loop against a fine teacher built from the
    constructor settings; ``transform`` then maps initial noise states to
    samples using the learned parameters.

    Parameters mirror :class:`epdsolve.distill.TrainConfig`; ``workers``
    controls the branch-evaluation pool used both in training and sampling.
    """

    def __init__(self, model: GaussianMixture | None = None, k_branches: int = 2,
                 num_steps: int = 3, schedule: str = "polynomial",
                 t_min: float = 0.002, t_max: float = 80.0, rho: float = 7.0,
                 afs: bool = True, plugin: bool = False,
                 teacher_kind: str = "dpm2", teacher_refine: int = 6,
                 sample_count: int = 1024, batch_size: int = 32,
                 iterations: int = 400, lr: float = 0.05, fd_step: float = 1e-3,
                 s_width: float = 0.1, sig_width: float = 0.1,
                 seed: int = 0, workers: int = 1):
        self.model = model
        self.k_branches = k_branches
        self.num_steps = num_steps
        self.schedule = schedule
        self.t_min = t_min
        self.t_max = t_max
        self.rho = rho
        self.afs = afs
        self.plugin = plugin
        self.teacher_kind = teacher_kind
        self.teacher_refine = teacher_refine
        self.sample_count = sample_count
        self.batch_size = batch_size
        self.iterations = iterations
        self.lr = lr
        self.fd_step = fd_step
        self.s_width = s_width
        self.sig_width = sig_width
        self.seed = seed
        self.workers = workers

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            n_steps=self.num_steps,
            k_branches=self.k_branches,
            schedule_kind=self.schedule,
            t_min=self.t_min,
            t_max=self.t_max,
            rho=self.rho,
            afs=self.afs,
            m_inner=self.teacher_refine,
            teacher_kind=self.teacher_kind,
            sample_count=self.sample_count,
            batch_size=self.batch_size,
            iterations=self.iterations,
            lr=self.lr,
            fd_step=self.fd_step,
            seed=self.seed,
            bounds=Bounds(self.s_width, self.sig_width),
        )

    def fit(self, X=None, y=None):
        """Distill the branch parameters; X and y are ignored."""
        if self.model is None:
            raise ValueError("model must be provided")
        config = self._train_config()
        with WorkerPool(self.workers) as pool:
            self.params_, self.train_log_ = train(
                config, self.model, pool, plugin=self.plugin
            )
        self.schedule_ = config.schedule()
        return self

    def transform(self, X) -> np.ndarray:
        """Map initial noise states (rows of X) to data-space samples."""
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before transform")
        X = check_states(X, dim=self.model.dim)
        with WorkerPool(self.workers) as pool:
            traj = run_epd(self.params_, self.model, pool, self.schedule_, X,
                           plugin=self.plugin)
        return traj.endpoint

    def sample(self, count: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return self.transform(sample_initial(rng, self.t_max, self.model.dim, count))
