import dataclasses

import numpy as np
import pytest

from epdsolve import (
    Bounds,
    BranchRaw,
    EpdParams,
    TrainConfig,
    WorkerPool,
    build_schedule,
    closed_form_flow,
    fd_gradient,
    generate_teacher_set,
    run_sampler,
    train,
)
from epdsolve.distill import AdamState, adam_step, initial_params, rollout_and_losses, teacher_refs_for

TINY = TrainConfig(
    n_steps=2,
    k_branches=1,
    sample_count=64,
    batch_size=16,
    iterations=25,
    patience=10**9,
    seed=3,
)


class TestTeacherSet:
    def test_degenerate_refinement_equals_plain_rollout(self, mixture):
        sched = build_schedule("polynomial", 4, 0.002, 80.0)
        cfg = dataclasses.replace(TINY, n_steps=4, m_inner=0, teacher_kind="ddim")
        ts = generate_teacher_set(mixture, sched, cfg, np.random.default_rng(0), count=8)
        plain = run_sampler("ddim", mixture, sched, ts.noises, afs=False)
        np.testing.assert_array_equal(ts.refs, plain.states)

    def test_single_gaussian_teacher_matches_closed_form(self, offset_gaussian):
        # fine enough that the second-order teacher resolves the exact flow
        sched = build_schedule("polynomial", 128, 0.002, 80.0)
        cfg = dataclasses.replace(TINY, n_steps=128, m_inner=6, teacher_kind="dpm2")
        ts = generate_teacher_set(offset_gaussian, sched, cfg, np.random.default_rng(1), count=16)
        exact = closed_form_flow(offset_gaussian.means[0], offset_gaussian.variances[0],
                                 ts.noises, 80.0, 0.002)
        err = np.linalg.norm(ts.refs[-1] - exact, axis=-1)
        scale = np.linalg.norm(exact, axis=-1)
        assert np.max(err / scale) <= 1e-4

    def test_deterministic_given_seed(self, mixture):
        sched = build_schedule("polynomial", 2, 0.002, 80.0)
        a = generate_teacher_set(mixture, sched, TINY, np.random.default_rng(7), count=8)
        b = generate_teacher_set(mixture, sched, TINY, np.random.default_rng(7), count=8)
        np.testing.assert_array_equal(a.noises, b.noises)
        np.testing.assert_array_equal(a.refs, b.refs)

    def test_first_reference_is_the_shared_noise(self, mixture):
        sched = build_schedule("polynomial", 2, 0.002, 80.0)
        ts = generate_teacher_set(mixture, sched, TINY, np.random.default_rng(2), count=4)
        np.testing.assert_array_equal(ts.refs[0], ts.noises)


class TestRolloutAndLosses:
    def test_self_distillation_losses_vanish(self, pool, mixture):
        # a single geometric-mean branch replicates the unrefined teacher
        sched = build_schedule("polynomial", 3, 0.002, 80.0)
        noises = np.random.default_rng(5).standard_normal((8, 2)) * 80.0
        teacher = teacher_refs_for(mixture, sched, "dpm2", 0, noises)
        params = EpdParams(steps=[[BranchRaw()] for _ in range(3)], bounds=Bounds(), afs=False)
        losses = rollout_and_losses(params, mixture, pool, sched, teacher)
        assert losses.shape == (3,)
        assert np.all(losses <= 1e-20)

    def test_start_node_loss_not_emitted(self, pool, mixture):
        sched = build_schedule("polynomial", 2, 0.002, 80.0)
        noises = np.random.default_rng(6).standard_normal((4, 2)) * 80.0
        teacher = teacher_refs_for(mixture, sched, "dpm2", 1, noises)
        params = initial_params(dataclasses.replace(TINY, n_steps=2))
        losses = rollout_and_losses(params, mixture, pool, sched, teacher)
        assert losses.shape == (2,)

    def test_perturbing_a_step_only_moves_later_nodes(self, pool, mixture):
        cfg = dataclasses.replace(TINY, n_steps=3)
        sched = build_schedule("polynomial", 3, 0.002, 80.0)
        noises = np.random.default_rng(8).standard_normal((8, 2)) * 80.0
        teacher = teacher_refs_for(mixture, sched, "dpm2", 2, noises)
        params = initial_params(cfg)
        base = rollout_and_losses(params, mixture, pool, sched, teacher)
        for step_idx in range(3):
            bumped = EpdParams(
                steps=[
                    [dataclasses.replace(b, r_raw=b.r_raw + (0.1 if i == step_idx else 0.0))
                     for b in step]
                    for i, step in enumerate(params.steps)
                ],
                bounds=params.bounds,
                afs=params.afs,
            )
            moved = rollout_and_losses(bumped, mixture, pool, sched, teacher)
            np.testing.assert_array_equal(moved[:step_idx], base[:step_idx])
            assert np.all(np.abs(moved[step_idx:] - base[step_idx:]) > 0)

    def test_teacher_schedule_mismatch_rejected(self, pool, mixture):
        sched2 = build_schedule("polynomial", 2, 0.002, 80.0)
        sched3 = build_schedule("polynomial", 3, 0.002, 80.0)
        noises = np.random.default_rng(9).standard_normal((4, 2)) * 80.0
        teacher = teacher_refs_for(mixture, sched2, "dpm2", 0, noises)
        params = initial_params(dataclasses.replace(TINY, n_steps=3))
        with pytest.raises(ValueError):
            rollout_and_losses(params, mixture, pool, sched3, teacher)


class TestFdGradient:
    def test_quadratic_probe(self):
        params = EpdParams(steps=[[BranchRaw(r_raw=1.0)]])

        def loss_fn(p):
            return p.steps[0][0].r_raw ** 2

        grad = fd_gradient(loss_fn, params, node=1, fd_step=1e-3)
        np.testing.assert_allclose(grad[0], 2.0, atol=1e-6)

    def test_parameters_after_the_node_get_exact_zero(self, pool, mixture):
        cfg = dataclasses.replace(TINY, n_steps=3, k_branches=2)
        sched = build_schedule("polynomial", 3, 0.002, 80.0)
        noises = np.random.default_rng(10).standard_normal((4, 2)) * 80.0
        teacher = teacher_refs_for(mixture, sched, "dpm2", 1, noises)
        params = initial_params(cfg)

        def loss_fn(p):
            return float(rollout_and_losses(p, mixture, pool, sched, teacher)[0])

        grad = fd_gradient(loss_fn, params, node=1, fd_step=1e-3)
        active = 1 * 2 * 4
        assert np.all(grad[active:] == 0.0)
        assert np.any(grad[:active] != 0.0)

    def test_halving_the_step_changes_little(self, pool, mixture):
        cfg = dataclasses.replace(TINY, n_steps=2, k_branches=2)
        sched = build_schedule("polynomial", 2, 0.002, 80.0)
        noises = np.random.default_rng(11).standard_normal((8, 2)) * 80.0
        teacher = teacher_refs_for(mixture, sched, "dpm2", 4, noises)
        rng = np.random.default_rng(12)
        params = EpdParams(
            steps=[[BranchRaw(*rng.normal(size=4) * 0.5) for _ in range(2)] for _ in range(2)],
            bounds=Bounds(),
        )

        def loss_fn(p):
            return float(rollout_and_losses(p, mixture, pool, sched, teacher)[-1])

        g1 = fd_gradient(loss_fn, params, node=2, fd_step=1e-3)
        g2 = fd_gradient(loss_fn, params, node=2, fd_step=5e-4)
        assert np.linalg.norm(g1 - g2) / np.linalg.norm(g1) < 0.01

    def test_nonpositive_step_rejected(self):
        params = EpdParams(steps=[[BranchRaw()]])
        with pytest.raises(ValueError):
            fd_gradient(lambda p: 0.0, params, node=1, fd_step=0.0)

    def test_nonfinite_loss_raises(self):
        params = EpdParams(steps=[[BranchRaw()]])
        with pytest.raises(RuntimeError):
            fd_gradient(lambda p: float("nan"), params, node=1, fd_step=1e-3)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        state = AdamState.zeros(4)
        theta = np.array([1.0, -2.0, 0.5, 0.0])
        out = adam_step(state, theta, np.zeros(4), lr=0.1)
        np.testing.assert_array_equal(out, theta)

    def test_constant_gradient_step_magnitude_approaches_lr(self):
        state = AdamState.zeros(1)
        theta = np.zeros(1)
        g = np.array([0.37])
        for _ in range(100):
            theta = adam_step(state, theta, g, lr=0.01)
        new = adam_step(state, theta, g, lr=0.01)
        np.testing.assert_allclose(abs(new - theta)[0], 0.01, rtol=1e-3)

    def test_deterministic_across_instances(self):
        rng = np.random.default_rng(13)
        grads = rng.normal(size=(20, 3))
        outs = []
        for _ in range(2):
            state = AdamState.zeros(3)
            theta = np.ones(3)
            for g in grads:
                theta = adam_step(state, theta, g, lr=0.05)
            outs.append(theta)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_sliced_update_leaves_rest_untouched(self):
        state = AdamState.zeros(4)
        theta = np.arange(4.0)
        out = adam_step(state, theta, np.ones(4), lr=0.1, active=slice(0, 2))
        np.testing.assert_array_equal(out[2:], theta[2:])
        assert np.all(out[:2] != theta[:2])
        np.testing.assert_array_equal(state.steps, [1, 1, 0, 0])


class TestTrain:
    def test_small_run_halves_the_final_loss(self, pool, mixture):
        cfg = dataclasses.replace(TINY, n_steps=3, iterations=200, sample_count=128,
                                  batch_size=32)
        params, log = train(cfg, mixture, pool)
        finals = log.losses_at_node(0)
        assert finals[-1] <= 0.5 * finals[0]
        assert params.n_steps == 3

    def test_identical_config_reproduces_the_log(self, pool, mixture):
        runs = []
        for _ in range(2):
            params, log = train(TINY, mixture, pool)
            runs.append((params.as_vector(), [r["loss"] for r in log.records]))
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        assert runs[0][1] == runs[1][1]

    def test_worker_count_does_not_change_values(self, mixture):
        results = []
        for workers in (1, 4):
            with WorkerPool(workers) as p:
                params, log = train(TINY, mixture, p)
            results.append((params.as_vector(), [r["loss"] for r in log.records]))
        np.testing.assert_array_equal(results[0][0], results[1][0])
        assert results[0][1] == results[1][1]

    def test_divergence_aborts_with_diagnostics(self, pool, mixture):
        calls = {"n": 0}

        def nan_oracle(x, t):
            calls["n"] += 1
            out = mixture(x, t)
            if calls["n"] > 40:
                out = out * np.nan
            return out

        nan_oracle.dim = 2
        with pytest.raises(RuntimeError, match="non-finite"):
            train(TINY, nan_oracle, pool)

    def test_early_stop_engages_on_plateau(self, pool, mixture):
        cfg = dataclasses.replace(TINY, iterations=200, patience=5, min_rel_improvement=0.5)
        _, log = train(cfg, mixture, pool)
        assert log.stopped_early
        iterations = {r["iteration"] for r in log.records}
        assert len(iterations) < 200

    def test_log_csv_format(self, pool, mixture):
        _, log = train(dataclasses.replace(TINY, iterations=3), mixture, pool)
        lines = log.to_csv().strip().splitlines()
        assert lines[0] == "iteration,node,loss,wall_ms"
        assert len(lines) == 1 + 3 * 2
