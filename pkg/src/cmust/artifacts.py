"""Run directories: metrics, epoch logs, checkpoints, freeze reports, attention exports."""

from __future__ import annotations

import csv
import io
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import NormStats
from .harness import ExperimentResult, TaskModel
from .io import atomic_write_json, atomic_write_text
from .msti import MSTIModel, ModelConfig
from .numerics import Parameter, load_checkpoint, save_checkpoint, sanitize

EPOCHLOG_FIELDS = ("task", "phase", "epoch", "train_loss", "val_mae", "best")


def save_task_model(path: str | os.PathLike, tm: TaskModel, extra_meta: dict | None = None) -> Path:
    params = [Parameter(name, tm.values[name], tm.masks[name]) for name in tm.values]
    meta = {"task": tm.task, "model_config": tm.model_config.to_dict(), "norm_stats": tm.norm_stats}
    meta.update(extra_meta or {})
    return save_checkpoint(path, params, meta)


def load_task_model(path: str | os.PathLike) -> tuple[MSTIModel, str, NormStats, dict]:
    """Rebuild a model from a per-task checkpoint; returns (model, task, stats, meta)."""
    params, meta = load_checkpoint(path)
    for key in ("task", "model_config", "norm_stats"):
        if key not in meta:
            raise ValueError(f"checkpoint meta lacks {key!r}")
    config = ModelConfig(**meta["model_config"])
    task = meta["task"]
    model = MSTIModel(config, seed=0)
    by_name = {p.name: p for p in params}
    expected = set(model.param_shapes()) | {f"prompt/{task}"}
    if set(by_name) != expected:
        missing, extra = sorted(expected - set(by_name)), sorted(set(by_name) - expected)
        raise ValueError(f"checkpoint does not match its model config: missing {missing}, unexpected {extra}")
    for name, prm in model.params.items():
        if by_name[name].shape != prm.shape:
            raise ValueError(f"{name}: checkpoint shape {by_name[name].shape} != config shape {prm.shape}")
        prm.value = by_name[name].value
        prm.freeze_mask = by_name[name].freeze_mask.copy()
    prompt = by_name[f"prompt/{task}"]
    model.set_prompt(task, prompt.value)
    model.prompts[task].freeze_mask = prompt.freeze_mask.copy()
    return model, task, NormStats.from_dict(meta["norm_stats"]), meta


def epochlog_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=EPOCHLOG_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        out = dict(r)
        out["train_loss"] = "" if r["train_loss"] is None else repr(float(r["train_loss"]))
        out["val_mae"] = repr(float(r["val_mae"]))
        out["best"] = int(bool(r["best"]))
        writer.writerow(out)
    return buf.getvalue()


def write_result(result: ExperimentResult, out_dir: str | os.PathLike) -> Path:
    """Write one experiment result; freeze/rolling files only for RoAda-based modes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / "metrics.json", result.metrics)
    atomic_write_text(out / "epochlog.csv", epochlog_csv(result.epoch_logs))
    atomic_write_json(out / "timing.json", {
        "wall_seconds": result.wall_seconds,
        "tasks": {m["task"]: m["wall_seconds"] for m in result.metrics},
    })
    for tm in result.task_models:
        save_task_model(out / "checkpoints" / sanitize(tm.task), tm,
                        {"mode": result.mode, "variant": result.variant, "seed": result.seed})
    if result.mode != "single":
        atomic_write_json(out / "freeze_report.json", [_freeze_json(r) for r in result.freeze_reports])
        atomic_write_json(out / "roada_run.json", dict(result.run_log or {}, seed=result.seed))
        for j, (phase, records) in enumerate(result.attention):
            atomic_write_json(out / "attention" / f"{j:02d}_{sanitize(phase)}.json",
                              {"phase": phase, "records": records})
    return out


def _freeze_json(report) -> dict:
    d = report.to_dict()
    d["parameters"] = [
        {"name": name, "shape": list(e.stable.shape), "stable_fraction": e.stable_fraction,
         "variance_histogram": _hist(e.variance)}
        for name, e in report.entries.items()
    ]
    return d


def _hist(var: np.ndarray) -> dict:
    from .roada import HIST_EDGES

    counts, _ = np.histogram(np.clip(var.ravel(), HIST_EDGES[0], HIST_EDGES[-1]), bins=HIST_EDGES)
    return {"edges": HIST_EDGES.tolist(), "counts": counts.tolist()}


def write_results(results: Sequence[ExperimentResult], out_dir: str | os.PathLike) -> list[Path]:
    """A single result goes in ``out_dir``; several (ablations) in per-variant subdirectories."""
    out = Path(out_dir)
    if len(results) == 1:
        return [write_result(results[0], out)]
    return [write_result(r, out / sanitize(r.variant)) for r in results]
