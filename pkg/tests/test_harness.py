import dataclasses
import json

import numpy as np
import pytest

from epdsolve import (
    ExperimentConfig,
    TrainConfig,
    Trajectory,
    WorkerPool,
    build_schedule,
    compute_trajectory_metrics,
    run_experiment,
    run_sampler,
)
from epdsolve.harness import (
    UnachievableBudget,
    initial_states_for_seeds,
    reference_trajectory,
    resolve_steps,
)


def tiny_config(tmp_path, **overrides):
    defaults = dict(
        solvers=("ddim", "epd"),
        k_list=(2,),
        budgets=(3,),
        seeds=tuple(range(100, 108)),
        train=TrainConfig(sample_count=32, batch_size=8, iterations=10, patience=10**9),
        reference_steps=256,
        bench_reps=0,
        out_dir=str(tmp_path / "out"),
        workers=2,
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


class TestResolveSteps:
    @pytest.mark.parametrize("kind,budget,afs,expected", [
        ("ddim", 3, True, 4),
        ("ddim", 3, False, 3),
        ("ipndm", 5, True, 6),
        ("heun", 5, True, 3),
        ("dpm2", 3, True, 2),
        ("epd", 5, True, 3),
        ("epd", 9, True, 5),
        ("epd-plugin", 7, True, 4),
        ("heun", 4, False, 2),
    ])
    def test_mapping(self, kind, budget, afs, expected):
        assert resolve_steps(kind, budget, afs) == expected

    def test_parity_violations(self):
        with pytest.raises(UnachievableBudget):
            resolve_steps("heun", 4, afs=True)
        with pytest.raises(UnachievableBudget):
            resolve_steps("epd", 3, afs=False)
        with pytest.raises(UnachievableBudget):
            resolve_steps("ddim", 0, afs=False)


class TestTrajectoryMetrics:
    def test_self_comparison_is_zero(self, mixture):
        sched = build_schedule("polynomial", 3, 0.002, 80.0)
        x = initial_states_for_seeds((1, 2, 3), 2, 80.0)
        traj = run_sampler("ddim", mixture, sched, x)
        row = compute_trajectory_metrics(traj, traj, "ddim")
        assert row.endpoint_error == 0.0
        assert all(e == 0.0 for e in row.node_errors)

    def test_mean_over_two_seeds(self):
        times = np.array([2.0, 1.0])
        ref = Trajectory(times=times, states=np.zeros((2, 2, 1)), nfe=0, para_nfe=0)
        states = np.zeros((2, 2, 1))
        states[1, 0, 0] = 1.0
        states[1, 1, 0] = 3.0
        traj = Trajectory(times=times, states=states, nfe=2, para_nfe=2)
        row = compute_trajectory_metrics(traj, ref, "synthetic")
        assert row.endpoint_error == 2.0

    def test_error_decreases_with_steps(self, mixture):
        x = initial_states_for_seeds(tuple(range(16)), 2, 80.0)
        errs = []
        for n in (4, 16, 64):
            sched = build_schedule("polynomial", n, 0.002, 80.0)
            ref = reference_trajectory(mixture, sched, x, min_steps=512)
            traj = run_sampler("ddim", mixture, sched, x)
            errs.append(compute_trajectory_metrics(traj, ref, "ddim").endpoint_error)
        assert errs[0] > errs[1] > errs[2] > 0

    def test_mismatched_endpoints_rejected(self, mixture):
        x = initial_states_for_seeds((1, 2), 2, 80.0)
        a = run_sampler("ddim", mixture, build_schedule("polynomial", 2, 0.002, 80.0), x)
        b = run_sampler("ddim", mixture, build_schedule("polynomial", 2, 0.01, 80.0), x)
        with pytest.raises(ValueError):
            compute_trajectory_metrics(a, b, "ddim")

    def test_reference_contains_student_nodes(self, mixture):
        sched = build_schedule("polynomial", 3, 0.002, 80.0)
        x = initial_states_for_seeds((5,), 2, 80.0)
        ref = reference_trajectory(mixture, sched, x, min_steps=100)
        np.testing.assert_array_equal(ref.times, sched.descending())


class TestRunExperiment:
    def test_writes_metrics_and_skips_unachievable(self, tmp_path, mixture):
        cfg = tiny_config(tmp_path, model=mixture, solvers=("ddim", "heun"),
                          budgets=(3, 4))
        summary = run_experiment(cfg)
        assert (tmp_path / "out" / "metrics.csv").exists()
        assert any(s["solver"] == "heun" and s["budget"] == 4 for s in summary["skipped"])
        labels = {r.solver for r in summary["rows"]}
        assert labels == {"ddim", "heun"}

    def test_metrics_csv_byte_identical_across_worker_counts(self, tmp_path, mixture):
        texts = []
        for workers in (1, 4):
            out = tmp_path / f"w{workers}"
            cfg = tiny_config(tmp_path, model=mixture, out_dir=str(out), workers=workers)
            run_experiment(cfg)
            texts.append((out / "metrics.csv").read_bytes())
        assert texts[0] == texts[1]

    def test_trajectory_files_written_for_selected_seeds(self, tmp_path, mixture):
        cfg = tiny_config(tmp_path, model=mixture, solvers=("ddim",),
                          traj_seeds=(100, 101))
        run_experiment(cfg)
        assert (tmp_path / "out" / "traj_ddim_100.csv").exists()
        assert (tmp_path / "out" / "traj_ddim_101.csv").exists()

    def test_epd_rows_report_branch_counts(self, tmp_path, mixture):
        cfg = tiny_config(tmp_path, model=mixture)
        summary = run_experiment(cfg)
        epd_rows = [r for r in summary["rows"] if r.solver.startswith("epd")]
        assert epd_rows and all(r.k_branches == 2 for r in epd_rows)
        assert all(r.para_nfe == 3 for r in epd_rows)


class TestExperimentConfigIO:
    def test_from_file_with_inline_model(self, tmp_path):
        doc = {
            "model": {"dim": 2, "components": [
                {"weight": 1.0, "mean": [0.0, 0.0], "var": [1.0, 1.0]},
            ]},
            "solvers": ["ddim"],
            "budgets": [3],
            "seeds": [1, 2],
            "train": {"iterations": 5, "sample_count": 16, "batch_size": 4},
            "out_dir": str(tmp_path / "res"),
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        cfg = ExperimentConfig.from_file(path)
        assert cfg.model.dim == 2
        assert cfg.train.iterations == 5
        assert cfg.solvers == ("ddim",)

    def test_seed_range_shorthand(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seed_range": [5, 9], "out_dir": "x"}))
        cfg = ExperimentConfig.from_file(path)
        assert cfg.seeds == (5, 6, 7, 8)

    def test_empty_seeds_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(seeds=())

    def test_unknown_solver_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(solvers=("rk4",))
