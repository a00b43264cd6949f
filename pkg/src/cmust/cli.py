"""Command-line entry point.

Exit codes: 0 success, 1 unexpected error, 2 invalid config / data /
checkpoint mismatch (and click usage errors), 3 training divergence.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import click

from .artifacts import load_task_model, write_results
from .config import (
    OUTPUT_ROOT_ENV,
    ConfigError,
    load_datasets,
    load_run_config,
    resolve_output_dir,
    to_experiment,
)
from .data import DatasetError, TaskData, generate_synthetic, load_dataset, save_dataset
from .harness import TrainingDivergence, attention_records, evaluate, run_experiment
from .io import atomic_write_json
from .msti import ModelConfig

EXIT_CONFIG = 2
EXIT_DIVERGED = 3

log = logging.getLogger("cmust")


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for per-epoch logs.")
def main(verbose: int):
    """Continuous multi-task spatiotemporal learning."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tasks", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--nodes", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--steps", type=click.IntRange(min=1), default=1344, show_default=True)
@click.option("--interval", type=click.IntRange(min=1), default=15, show_default=True, help="Minutes per step.")
@click.option("--coupling", type=click.FloatRange(0.0, 1.0), default=1.0, show_default=True)
@click.option("--noise", type=click.FloatRange(min=0.0), default=0.1, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help=f"Target directory (default: ${OUTPUT_ROOT_ENV}/data).")
def gen(seed, tasks, nodes, steps, interval, coupling, noise, out_dir):
    """Write synthetic correlated task datasets."""
    out = Path(out_dir) if out_dir else _output_root() / "data"
    try:
        sets = generate_synthetic(seed, tasks, nodes, steps, interval, coupling, noise)
    except DatasetError as exc:
        _fail(EXIT_CONFIG, str(exc))
    try:
        for ds in sets:
            path = save_dataset(ds, out / ds.name)
            click.echo(str(path))
    except OSError as exc:
        _fail(1, f"cannot write {out}: {exc}")


def _load_run(config_path):
    try:
        run = load_run_config(config_path)
        return run, to_experiment(run), load_datasets(run)
    except (ConfigError, DatasetError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))


def _execute(run, exp, datasets, out: Path):
    try:
        results = run_experiment(run.mode, datasets, exp)
    except TrainingDivergence as exc:
        _fail(EXIT_DIVERGED, f"training diverged: {exc}")
    except (DatasetError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / "resolved_config.json", run.model_dump(mode="json"))
    write_results(results, out)
    return results


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
def train(config_path, out_dir):
    """Run single | roada | ablation as configured and write all artifacts."""
    run, exp, datasets = _load_run(config_path)
    out = resolve_output_dir(run, out_dir)
    results = _execute(run, exp, datasets, out)
    for r in results:
        for m in r.metrics:
            click.echo(f"{r.variant:>16} {m['task']:>12} MAE {m['MAE']:.6f} MAPE {m['MAPE']:.6f}")
    click.echo(str(out))


def _load_for_eval(checkpoint, dataset_dir):
    try:
        model, task, stats, meta = load_task_model(checkpoint)
        ds = load_dataset(dataset_dir)
    except (OSError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    c = model.config
    m = ds.manifest
    if (m.N, m.C, m.slots_per_day) != (c.num_nodes, c.c_in, c.slots_per_day):
        _fail(EXIT_CONFIG, f"dataset (N={m.N}, C={m.C}, L_t={m.slots_per_day}) does not match checkpoint "
                           f"(N={c.num_nodes}, C={c.c_in}, L_t={c.slots_per_day})")
    try:
        data = TaskData(ds, c.input_len, c.horizon, stats=stats)
    except DatasetError as exc:
        _fail(EXIT_CONFIG, str(exc))
    return model, task, data


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--out", "out_file", type=click.Path(dir_okay=False), default=None)
def eval_cmd(checkpoint, dataset_dir, split, out_file):
    """Evaluate a per-task checkpoint without training."""
    model, task, data = _load_for_eval(checkpoint, dataset_dir)
    report = evaluate(model, data, task, split)
    payload = {"task": task, "split": split, "MAE": report.mae, "MAPE": report.mape,
               "n_samples": report.n_samples, "horizon_mae": report.horizon_mae}
    if out_file:
        atomic_write_json(out_file, payload)
    click.echo(json.dumps(payload))


@main.command("export-attention")
@click.option("--checkpoint", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--window", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--out", "out_file", type=click.Path(dir_okay=False), required=True)
def export_attention(checkpoint, dataset_dir, window, split, out_file):
    """Dump per-stage, per-head attention matrices for one window as JSON."""
    model, task, data = _load_for_eval(checkpoint, dataset_dir)
    try:
        records = attention_records(model, data, task, window, split)
    except IndexError as exc:
        _fail(EXIT_CONFIG, str(exc))
    atomic_write_json(out_file, {"task": task, "split": split, "records": records})
    click.echo(f"{len(records)} matrices -> {out_file}")


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
def sweep(config_path, out_dir):
    """Grid over prompt width, head count and variance threshold."""
    run, exp, datasets = _load_run(config_path)
    out = resolve_output_dir(run, out_dir)
    grid = run.sweep
    summary = {"runs": [], "skipped": []}
    for d_p, heads, delta in itertools.product(grid.d_p, grid.heads, grid.variance_threshold):
        label = f"dp{d_p}_h{heads}_delta{delta:g}"
        overrides = dict(exp.model_overrides, d_p=d_p, heads=heads)
        try:
            ModelConfig.profile(exp.profile, **overrides)
        except ValueError as exc:
            summary["skipped"].append({"label": label, "reason": str(exc)})
            continue
        cell = replace(exp, model_overrides=overrides, roada=replace(exp.roada, variance_threshold=delta))
        resolved = run.model_copy(update={
            "model": overrides, "roada": run.roada.model_copy(update={"variance_threshold": delta}),
        })
        results = _execute(resolved, cell, datasets, out / label)
        summary["runs"].append({
            "label": label, "d_p": d_p, "heads": heads, "variance_threshold": delta,
            "mean_MAE": {r.variant: r.mean_mae for r in results},
        })
        click.echo(f"{label}: " + ", ".join(f"{r.variant} {r.mean_mae:.6f}" for r in results))
    atomic_write_json(out / "sweep.json", summary)
    click.echo(str(out))


if __name__ == "__main__":
    main()
