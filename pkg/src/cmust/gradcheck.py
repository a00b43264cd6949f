"""Finite-difference gradient checks for the full model.

Central differences are taken per element exactly as in
:func:`cmust.numerics.finite_difference_gradient`, but the forward pass is
restarted from the cached input of the first stage that consumes the
perturbed parameter. Earlier stages do not depend on it, so every loss value
is bit-identical to a full forward pass; only the redundant prefix work is
skipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Batch
from .msti import AttentionMaps, MSTIModel
from .numerics import NonFiniteError, huber_loss, no_grad, relative_error, zero_grad


@dataclass
class GradCheckRow:
    name: str
    size: int
    rel_error: float  # ||a - b|| / (||a|| + ||b|| + 1e-8)
    max_elem_rel_error: float
    max_abs_diff: float


def model_loss(model: MSTIModel, batch: Batch, coords, task: str, huber_delta: float = 1.0):
    pred, _ = model.forward(batch, coords, task)
    return huber_loss(pred, batch.y, huber_delta)


def analytic_gradients(model: MSTIModel, batch: Batch, coords, task: str, huber_delta: float = 1.0):
    params = model.all_params()
    zero_grad(params)
    model_loss(model, batch, coords, task, huber_delta).backward()
    return {p.name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for p in params}


def stagewise_finite_difference(
    model: MSTIModel, batch: Batch, coords, task: str, h: float = 1e-5, huber_delta: float = 1.0,
    names: list[str] | None = None,
) -> dict[str, np.ndarray]:
    plan = model.stage_plan()
    owners = {}
    for p in model.all_params():
        if names is not None and p.name not in names:
            continue
        if p.name.startswith("prompt/") and p.name != f"prompt/{task}":
            continue
        for k, (_, prefixes) in enumerate(plan):
            if p.name.startswith(prefixes):
                owners[p.name] = k
                break
        else:
            raise KeyError(f"no stage consumes parameter {p.name!r}")

    def run_from(k: int, state) -> float:
        maps = AttentionMaps()
        for stage, _ in plan[k:]:
            state = model.run_stage(stage, state, batch, coords, task, maps)
        return float(huber_loss(state, batch.y, huber_delta).data)

    out = {}
    with no_grad():
        cache = [None]
        state = None
        maps = AttentionMaps()
        for stage, _ in plan[:-1]:
            state = model.run_stage(stage, state, batch, coords, task, maps)
            cache.append(state)
        lookup = {p.name: p for p in model.all_params()}
        for name, k in owners.items():
            p = lookup[name]
            flat = p.tensor.data.reshape(-1)
            est = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = run_from(k, cache[k])
                flat[i] = orig - h
                fm = run_from(k, cache[k])
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"non-finite loss perturbing {name}[{i}]")
                est[i] = (fp - fm) / (2.0 * h)
            out[name] = est.reshape(p.shape)
    return out


def compare(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> list[GradCheckRow]:
    rows = []
    for name, b in numeric.items():
        a = analytic[name]
        rel = float(np.linalg.norm(a - b) / (np.linalg.norm(a) + np.linalg.norm(b) + 1e-8))
        rows.append(GradCheckRow(
            name, a.size, rel, float(relative_error(a, b).max()), float(np.abs(a - b).max()),
        ))
    return rows
