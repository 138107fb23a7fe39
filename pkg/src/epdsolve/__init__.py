"""Ensemble parallel-direction ODE sampling toolkit.

Few-step sampling of diffusion-style flows where each solver step combines K
concurrently evaluated intermediate gradients.  Branch parameters are learned
by distillation against a fine teacher solver; everything is verified against
exact Gaussian-mixture score oracles.
"""

from .distill import TeacherSet, TrainConfig, TrainLog, fd_gradient, generate_teacher_set, train
from .epd import (
    Bounds,
    BranchRaw,
    DerivedBranch,
    EpdParams,
    derive_step_params,
    epd_plugin_step,
    epd_step,
    fixture_paths,
    load_params,
    run_epd,
    save_params,
)
from .estimators import BaselineSampler, EpdSampler
from .gmm import (
    CountingOracle,
    GaussianMixture,
    benchmark_mixture,
    closed_form_flow,
    load_gmm,
    noise_prediction,
    sample_initial,
    score,
    with_cost,
)
from .harness import (
    ExperimentConfig,
    MetricsRow,
    compute_trajectory_metrics,
    run_experiment,
    validate_fixtures,
)
from .parallel import BranchEvalError, EvalRequest, LatencyReport, WorkerPool, bench_step_latency, par_map_eval
from .schedules import TimeSchedule, build_schedule, refine_for_teacher
from .solvers import (
    HistoryBuffer,
    Trajectory,
    afs_direction,
    dpm2_step,
    euler_step,
    heun_step,
    ipndm_step,
    run_sampler,
)

__version__ = "0.1.0"
