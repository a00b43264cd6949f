"""Training with early stopping, evaluation, and experiment drivers."""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import DatasetError, STDataset, TaskData, denormalize
from .msti import STAGE_AXIS, MSTIModel, ModelConfig
from .numerics import NonFiniteError, adam_step, huber_loss, no_grad, zero_grad

log = logging.getLogger(__name__)

MAPE_FLOOR = 1e-4


class TrainingDivergence(RuntimeError):
    """Non-finite loss or update during training."""


def derive_seed(seed: int, *labels) -> np.random.SeedSequence:
    """Deterministic child seed from the run seed and string/int labels."""
    words = [int(seed)] + [zlib.crc32(str(lab).encode("utf-8")) for lab in labels]
    return np.random.SeedSequence(words)


def rng_for(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 16
    patience: int = 5
    max_epochs: int = 20
    seed: int = 0
    huber_delta: float = 1.0
    profile: str = "tiny"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("lr and batch_size must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")


@dataclass
class EvalReport:
    task: str
    mae: float
    mape: float
    n_samples: int
    horizon_mae: list[float]
    runtime_seconds: float = 0.0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float | None
    val_mae: float
    best: bool


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - target)))


def masked_mape(pred: np.ndarray, target: np.ndarray, floor: float = MAPE_FLOOR) -> float:
    mask = np.abs(target) >= floor
    if not mask.any():
        return 0.0
    return float(np.mean(np.abs(pred[mask] - target[mask]) / np.abs(target[mask])))


def predict(model: MSTIModel, data: TaskData, task: str, starts, batch_size: int = 64) -> np.ndarray:
    """Denormalised predictions (windows, T', N, 1)."""
    outs = []
    with no_grad():
        for i in range(0, len(starts), batch_size):
            batch = data.batch(starts[i : i + batch_size])
            pred, _ = model.forward(batch, data.coords, task)
            outs.append(pred.data)
    z = np.concatenate(outs, axis=0)
    return denormalize(z, _channel0(data))


def _channel0(data: TaskData):
    from .data import NormStats

    return NormStats(data.stats.mean[:1], data.stats.std[:1])


def evaluate(model: MSTIModel, data: TaskData, task: str, split: str = "test", batch_size: int = 64) -> EvalReport:
    """MAE / masked MAPE on denormalised predictions for one split."""
    t0 = time.perf_counter()
    starts = data.split.windows[split]
    if len(starts) == 0:
        raise DatasetError(f"empty {split} set")
    pred = predict(model, data, task, starts, batch_size)
    target = data.batch(starts).y_raw
    err = np.abs(pred - target)
    horizon = err.mean(axis=(0, 2, 3))
    return EvalReport(
        task=task,
        mae=float(err.mean()),
        mape=masked_mape(pred, target),
        n_samples=int(len(starts)),
        horizon_mae=[float(v) for v in horizon],
        runtime_seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_until_convergence(
    model: MSTIModel,
    data: TaskData,
    task: str,
    config: TrainConfig,
    lr: float | None = None,
    max_epochs: int | None = None,
    phase: str = "train",
    on_epoch: Callable[[int, MSTIModel], None] | None = None,
) -> tuple[dict[str, np.ndarray], list[EpochRecord]]:
    """Mini-batch Huber training with early stopping on validation MAE.

    The starting weights are scored as epoch 0 and are a candidate for the
    best state, so the returned weights never validate worse than the input.
    Only shared weights and ``task``'s own prompt are updated. The best state
    is loaded back into ``model`` before returning.
    """
    lr = config.lr if lr is None else lr
    max_epochs = config.max_epochs if max_epochs is None else max_epochs
    params = list(model.params.values()) + [model.prompts[task]]
    for p in params:
        p.reset_state()
    # fully frozen tensors need no weight gradient; restored on exit
    idle = [p for p in params if not p.trainable]
    for p in idle:
        p.tensor.requires_grad = False
    try:
        return _train_loop(model, data, task, config, params, lr, max_epochs, phase, on_epoch)
    finally:
        for p in idle:
            p.tensor.requires_grad = True


def _train_loop(model, data, task, config, params, lr, max_epochs, phase, on_epoch):
    rng = rng_for(config.seed, phase, task)
    train_starts = data.split.windows["train"]

    best_mae = evaluate(model, data, task, "val").mae
    best_state = model.state()
    records = [EpochRecord(0, None, best_mae, True)]
    wait = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(train_starts)
        losses = []
        for bi, i in enumerate(range(0, len(order), config.batch_size)):
            batch = data.batch(order[i : i + config.batch_size])
            zero_grad(params)
            try:
                pred, _ = model.forward(batch, data.coords, task)
                loss = huber_loss(pred, batch.y, config.huber_delta)
                loss.backward()
                adam_step(params, lr, config.weight_decay, config.betas[0], config.betas[1], config.eps)
            except NonFiniteError as exc:
                raise TrainingDivergence(f"{phase}/{task}: epoch {epoch}, batch {bi}: {exc}") from exc
            losses.append(float(loss.data))
        zero_grad(params)
        val = evaluate(model, data, task, "val").mae
        improved = val < best_mae
        if improved:
            best_mae, best_state, wait = val, model.state(), 0
        else:
            wait += 1
        records.append(EpochRecord(epoch, float(np.mean(losses)), val, improved))
        log.debug("%s/%s epoch %d loss %.5f val_mae %.5f", phase, task, epoch, records[-1].train_loss, val)
        if on_epoch is not None:
            on_epoch(epoch, model)
        if wait >= config.patience:
            break
    model.load_state(best_state)
    return best_state, records


# ---------------------------------------------------------------------------
# dataset transforms for sparsity experiments
# ---------------------------------------------------------------------------


def sparsity_transform(
    dataset: STDataset,
    node_fraction: float | None = None,
    interval_multiplier: int | None = None,
    seed: int = 0,
) -> STDataset:
    """Keep a seeded random fraction of nodes and/or coarsen the time step.

    Interval expansion averages consecutive groups of ``interval_multiplier``
    steps; a trailing partial group is dropped.
    """
    m = dataset.manifest
    obs = dataset.observations
    coords = np.asarray(m.coords, dtype=float)
    interval, T_all, N = m.interval_minutes, m.T_all, m.N
    if node_fraction is not None:
        if not 0.0 < node_fraction <= 1.0:
            raise ValueError("node_fraction must lie in (0, 1]")
        keep = max(1, int(round(node_fraction * N)))
        if keep < N:
            idx = np.sort(rng_for(seed, "sparsity").choice(N, size=keep, replace=False))
            obs, coords, N = obs[:, idx], coords[idx], keep
    if interval_multiplier is not None and interval_multiplier != 1:
        k = int(interval_multiplier)
        if k < 1:
            raise ValueError("interval_multiplier must be a positive integer")
        if 1440 % (interval * k):
            raise ValueError(f"interval {interval * k} min does not divide a day")
        usable = (T_all // k) * k
        if usable != T_all:
            log.warning("dropping %d trailing steps not filling a group of %d", T_all - usable, k)
        obs = obs[:usable].reshape(usable // k, k, N, m.C).mean(axis=1)
        T_all, interval = usable // k, interval * k
    manifest = replace(m, T_all=T_all, N=N, interval_minutes=interval, coords=coords.tolist())
    return STDataset(manifest, obs)


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------


def attention_records(model: MSTIModel, data: TaskData, task: str, window: int = 0, split: str = "test",
                      context: int | None = None) -> list[dict]:
    """Per stage/head/context score matrices for one window as JSON-ready dicts."""
    starts = data.split.windows[split]
    if not 0 <= window < len(starts):
        raise IndexError(f"window {window} outside [0, {len(starts)})")
    with no_grad():
        _, maps = model.forward(data.batch(starts[window : window + 1]), data.coords, task)
    out = []
    for stage, arr in maps.scores.items():
        base = stage.split("/")[-1]
        # arr: (1, contexts, heads, S, S)
        for ctx in range(arr.shape[1]):
            if context is not None and ctx != context:
                continue
            for head in range(arr.shape[2]):
                out.append({
                    "stage": stage,
                    "head": head,
                    "axis": STAGE_AXIS[base],
                    "matrix": arr[0, ctx, head].tolist(),
                    "batch_index": int(window),
                    "context_index": ctx,
                })
    return out


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    profile: str = "tiny"
    model_overrides: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    roada: "RoAdaConfig" = None  # type: ignore[assignment]
    seed: int = 0
    input_len: int = 12
    horizon: int = 12
    stride: int = 1
    ablations: list[str] = field(default_factory=list)
    deterministic: bool = True

    def __post_init__(self):
        from .roada import RoAdaConfig

        if self.roada is None:
            self.roada = RoAdaConfig()
        self.train = replace(self.train, seed=self.seed)
        self.roada = replace(self.roada, seed=self.seed)


def model_config_for(config: ExperimentConfig, data: Sequence[TaskData], **overrides) -> ModelConfig:
    first = data[0].manifest
    for d in data[1:]:
        m = d.manifest
        if (m.N, m.C, m.slots_per_day) != (first.N, first.C, first.slots_per_day):
            raise DatasetError("all tasks must share node count, channel count and interval")
    kw = dict(config.model_overrides)
    kw.update(overrides)
    return ModelConfig.profile(
        config.profile,
        num_nodes=first.N,
        c_in=first.C,
        slots_per_day=first.slots_per_day,
        input_len=config.input_len,
        horizon=config.horizon,
        **kw,
    )


@dataclass
class TaskModel:
    """Checkpoint-ready snapshot of one task's model."""

    task: str
    model_config: ModelConfig
    values: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    norm_stats: dict


@dataclass
class ExperimentResult:
    mode: str
    variant: str
    seed: int
    metrics: list[dict]
    task_models: list[TaskModel]
    epoch_logs: list[dict]
    freeze_reports: list = field(default_factory=list)
    run_log: dict | None = None
    attention: list[tuple[str, list[dict]]] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def mean_mae(self) -> float:
        return float(np.mean([m["MAE"] for m in self.metrics]))


ABLATIONS = ("no_interaction", "no_freeze", "no_prompt")


def snapshot_task_model(model: MSTIModel, task: str, data: TaskData) -> TaskModel:
    values = {name: p.value.copy() for name, p in model.params.items()}
    masks = {name: p.freeze_mask.copy() for name, p in model.params.items()}
    prompt = model.prompts[task]
    values[prompt.name] = prompt.value.copy()
    masks[prompt.name] = prompt.freeze_mask.copy()
    return TaskModel(task, model.config, values, masks, data.stats.to_dict())


def _metric_row(report: EvalReport, mode: str, seed: int, epochs: int, wall: float | None) -> dict:
    return {
        "task": report.task,
        "mode": mode,
        "seed": seed,
        "MAE": report.mae,
        "MAPE": report.mape,
        "horizon_mae": report.horizon_mae,
        "epochs": epochs,
        "wall_seconds": wall,
    }


def run_single(datasets: Sequence[STDataset], config: ExperimentConfig) -> ExperimentResult:
    """One freshly initialised model per task, trained independently."""
    from .roada import build_task_prompt

    t0 = time.perf_counter()
    data = [TaskData(d, config.input_len, config.horizon, config.stride) for d in datasets]
    mcfg = model_config_for(config, data)
    metrics, task_models, logs = [], [], []
    for td in data:
        start = time.perf_counter()
        model = MSTIModel(mcfg, seed=int(derive_seed(config.seed, "init").generate_state(1)[0]))
        artifact = build_task_prompt(td, mcfg, config.roada)
        model.set_prompt(td.name, artifact.prompt_init)
        _, records = train_until_convergence(model, td, td.name, config.train, phase="single")
        report = evaluate(model, td, td.name, "test")
        wall = None if config.deterministic else time.perf_counter() - start
        metrics.append(_metric_row(report, "single", config.seed, len(records) - 1, wall))
        task_models.append(snapshot_task_model(model, td.name, td))
        logs += [dict(task=td.name, phase="single", **r.__dict__) for r in records]
    return ExperimentResult("single", "single", config.seed, metrics, task_models, logs,
                            wall_seconds=time.perf_counter() - t0)


def run_experiment(mode: str, datasets: Sequence[STDataset], config: ExperimentConfig) -> list[ExperimentResult]:
    """Dispatch ``single`` | ``roada`` | ``ablation``.

    ``ablation`` runs the full pipeline once per variant named in
    ``config.ablations`` (default: all three).
    """
    from .roada import roada_full

    if mode == "single":
        return [run_single(datasets, config)]
    if mode == "roada":
        return [roada_full(datasets, config)]
    if mode == "ablation":
        variants = config.ablations or list(ABLATIONS)
        unknown = set(variants) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation(s): {sorted(unknown)}")
        return [roada_full(datasets, config, variant=v) for v in variants]
    raise ValueError(f"unknown mode {mode!r}; expected single, roada or ablation")
