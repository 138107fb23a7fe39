"""Command-line experiment driver.

Every subcommand takes ``--config`` (a JSON experiment file, see
``ExperimentConfig``) plus ``--seed``, ``--out`` and ``--workers`` overrides.
On failure a machine-readable JSON error record is printed to stderr and the
exit code is nonzero.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from functools import wraps
from pathlib import Path

import click
import numpy as np

from .distill import teacher_refs_for, train as train_params
from .epd import fixture_paths, load_params, run_epd, save_params
from .gmm import sample_initial, with_cost
from .harness import (
    ExperimentConfig,
    resolve_steps,
    run_experiment,
    validate_fixtures,
)
from .parallel import WorkerPool, bench_step_latency
from .solvers import BASELINE_KINDS, run_sampler, trajectory_to_csv


def _fail(exc: BaseException) -> None:
    record = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(record), err=True)
    sys.exit(2)


def _with_config(fn):
    @click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                  help="Experiment config file (JSON); defaults apply when omitted.")
    @click.option("--seed", type=int, default=None, help="Override the training seed.")
    @click.option("--out", "out_dir", type=click.Path(), default=None, help="Output directory.")
    @click.option("--workers", type=int, default=None, help="Branch-evaluation worker count.")
    @wraps(fn)
    def wrapper(config_path, seed, out_dir, workers, **kwargs):
        try:
            cfg = ExperimentConfig.from_file(config_path) if config_path else ExperimentConfig()
            if seed is not None:
                cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))
            if out_dir is not None:
                cfg = dataclasses.replace(cfg, out_dir=out_dir)
            if workers is not None:
                cfg = dataclasses.replace(cfg, workers=workers)
            fn(cfg, **kwargs)
        except Exception as exc:  # noqa: BLE001 - uniform machine-readable failure
            _fail(exc)

    return wrapper


@click.group()
def main():
    """Ensemble parallel-direction sampling experiments on analytic mixtures."""


@main.command()
@_with_config
@click.option("--count", type=int, default=64, show_default=True, help="Teacher sample count.")
def teacher(cfg: ExperimentConfig, count: int):
    """Generate teacher reference states at the student nodes."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schedule = cfg.schedule_for(cfg.train.n_steps)
    rng = np.random.default_rng(cfg.train.seed)
    noises = sample_initial(rng, cfg.t_max, cfg.model.dim, count)
    refs = teacher_refs_for(cfg.model, schedule, cfg.train.teacher_kind, cfg.train.m_inner, noises)
    lines = ["sample,node,t," + ",".join(f"x{j}" for j in range(cfg.model.dim))]
    for i, t in enumerate(schedule.descending()):
        for b in range(count):
            coords = ",".join(repr(float(v)) for v in refs.refs[i, b])
            lines.append(f"{b},{i},{t!r},{coords}")
    path = out / f"teacher_{cfg.train.teacher_kind}_M{cfg.train.m_inner}.csv"
    path.write_text("\n".join(lines) + "\n")
    click.echo(f"wrote {path}")


@main.command()
@_with_config
def train(cfg: ExperimentConfig):
    """Distill branch parameters and save them with the training log."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    row_cfg = dataclasses.replace(
        cfg.train, schedule_kind=cfg.schedule_kind, t_min=cfg.t_min,
        t_max=cfg.t_max, rho=cfg.rho, afs=cfg.afs,
    )
    with WorkerPool(cfg.workers) as pool:
        params, log = train_params(row_cfg, cfg.model, pool)
    save_params(params, out / "params.json")
    (out / "train_log.csv").write_text(log.to_csv())
    final = log.records[-1]["loss"]
    click.echo(f"wrote {out / 'params.json'} (final node loss {final:.6g})")


@main.command()
@_with_config
@click.option("--solver", default="epd", show_default=True,
              help="Solver kind, or 'epd'/'epd-plugin' with --params.")
@click.option("--params", "params_path", type=click.Path(exists=True), default=None,
              help="Parameter file for the ensemble solvers.")
@click.option("--count", type=int, default=8, show_default=True, help="Samples to draw.")
def sample(cfg: ExperimentConfig, solver: str, params_path: str | None, count: int):
    """Sample trajectories and write one CSV per seed index."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.train.seed)
    x0 = sample_initial(rng, cfg.t_max, cfg.model.dim, count)
    if solver in BASELINE_KINDS:
        schedule = cfg.schedule_for(cfg.train.n_steps)
        traj = run_sampler(solver, cfg.model, schedule, x0, afs=cfg.afs)
    else:
        if params_path is None:
            raise click.UsageError("ensemble solvers need --params")
        params = load_params(params_path)
        schedule = cfg.schedule_for(params.n_steps)
        with WorkerPool(cfg.workers) as pool:
            traj = run_epd(params, cfg.model, pool, schedule, x0,
                           plugin=(solver == "epd-plugin"))
    for b in range(count):
        (out / f"traj_{solver}_{b}.csv").write_text(trajectory_to_csv(traj, sample_index=b))
    click.echo(f"wrote {count} trajectories to {out} (nfe={traj.nfe}, para_nfe={traj.para_nfe})")


@main.command()
@_with_config
def compare(cfg: ExperimentConfig):
    """Run the full solver-comparison grid and write metrics.csv."""
    summary = run_experiment(cfg)
    for row in summary["skipped"]:
        click.echo(f"skipped {row['solver']} at budget {row['budget']}: {row['reason']}")
    click.echo(f"wrote {summary['out_dir']}/metrics.csv ({len(summary['rows'])} rows)")


@main.command()
@_with_config
@click.option("--cost-ms", type=float, default=None, help="Synthetic oracle cost per call.")
@click.option("--reps", type=int, default=None, help="Timed repetitions per row.")
def bench(cfg: ExperimentConfig, cost_ms: float | None, reps: int | None):
    """Measure per-step latency across branch counts and worker counts."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cost = cfg.bench_cost_ms if cost_ms is None else cost_ms
    n_reps = cfg.bench_reps if reps is None else reps
    costed = with_cost(cfg.model, int(cost * 1e6))
    report = bench_step_latency(
        costed, k_values=sorted(set((1,) + tuple(cfg.k_list))),
        workers=[1, cfg.workers], reps=n_reps,
    )
    (out / "latency.csv").write_text(report.to_csv())
    click.echo((out / "latency.csv").read_text().rstrip())


@main.command("validate-params")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Unused; accepted for interface uniformity.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Optional directory for a JSON report.")
@click.argument("paths", nargs=-1, type=click.Path(exists=True))
def validate_params(config_path, out_dir, paths):
    """Validate parameter files (defaults to the distributed fixture set)."""
    try:
        targets = list(paths) if paths else fixture_paths()
        reports = validate_fixtures(targets)
        for rep in reports:
            click.echo(rep.summary())
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            doc = [
                {"path": r.path, "ok": r.ok, "violations": r.violations,
                 "output_offsets": r.output_offsets}
                for r in reports
            ]
            (out / "fixture_report.json").write_text(json.dumps(doc, indent=2) + "\n")
        if not all(r.ok for r in reports):
            sys.exit(1)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


if __name__ == "__main__":
    main()
