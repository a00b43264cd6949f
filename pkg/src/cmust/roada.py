"""Rolling adaptation: task prompts, variance-based freezing, warm-up and refinement."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import DatasetError, STDataset, TaskData, temporal_indicators
from .harness import (
    EpochRecord,
    ExperimentConfig,
    ExperimentResult,
    TaskModel,
    TrainConfig,
    _metric_row,
    attention_records,
    derive_seed,
    evaluate,
    model_config_for,
    snapshot_task_model,
    train_until_convergence,
)
from .msti import MSTIModel, ModelConfig
from .numerics import Parameter, Tensor, linear, sigmoid, square, zero_grad

log = logging.getLogger(__name__)

HIST_EDGES = np.logspace(-16, 0, 17)


@dataclass
class RoAdaConfig:
    variance_threshold: float = 1e-6
    lr: float = 1e-3
    rolling_lr_factor: float = 0.01
    weight_decay: float = 3e-4
    patience: int = 5
    max_epochs_warmup: int = 20
    max_epochs_rolling: int = 3
    max_epochs_refine: int = 10
    task_order: list[str] | None = None
    seed: int = 0
    freeze: bool = True
    freeze_mode: str = "element"
    refine_unfrozen: bool = False
    latent_dim: int = 16
    ae_epochs: int = 500
    ae_lr: float = 1.0

    def __post_init__(self):
        if self.variance_threshold <= 0:
            raise ValueError("variance_threshold must be positive")
        if not 0.0 < self.rolling_lr_factor <= 1.0:
            raise ValueError("rolling_lr_factor must lie in (0, 1]")
        if self.freeze_mode not in ("element", "per_tensor"):
            raise ValueError("freeze_mode must be 'element' or 'per_tensor'")
        if min(self.max_epochs_warmup, self.max_epochs_rolling, self.max_epochs_refine) < 1:
            raise ValueError("epoch limits must be >= 1")


# ---------------------------------------------------------------------------
# task prompts
# ---------------------------------------------------------------------------


def daily_average_sample(dataset: STDataset, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Mean over days of each time-of-day slot: (L_t, N, C).

    Only steps in ``[start, stop)`` are used; slots are aligned to the
    manifest's start timestamp.
    """
    m = dataset.manifest
    stop = m.T_all if stop is None else stop
    L_t = m.slots_per_day
    if stop - start < L_t:
        raise DatasetError(f"{stop - start} steps cover less than one day ({L_t} slots)")
    tod0, _, _ = temporal_indicators(m, start)
    slot = (tod0 + np.arange(stop - start)) % L_t
    obs = dataset.observations[start:stop]
    total = np.zeros((L_t, m.N, m.C))
    np.add.at(total, slot, obs)
    count = np.bincount(slot, minlength=L_t).astype(float)
    return total / count[:, None, None]


@dataclass
class TaskPromptArtifact:
    task: str
    sample: np.ndarray  # L_t x N x C
    encoder_w: np.ndarray
    encoder_b: np.ndarray
    decoder_w: np.ndarray
    decoder_b: np.ndarray
    latent: np.ndarray  # N x d_e
    prompt_init: np.ndarray
    mse_initial: float
    mse_final: float


def _ae_input(sample: np.ndarray) -> np.ndarray:
    lo = sample.min(axis=(0, 1))
    span = sample.max(axis=(0, 1)) - lo
    span = np.where(span > 0, span, 1.0)
    scaled = (sample - lo) / span
    L_t, N, C = scaled.shape
    return scaled.transpose(1, 0, 2).reshape(N, L_t * C)


def train_autoencoder(sample: np.ndarray, latent_dim: int = 16, epochs: int = 500, lr: float = 1.0,
                      seed: int | np.random.SeedSequence = 0):
    """Sigmoid encoder / linear decoder fitted by full-batch gradient descent.

    Returns (params dict, latent (N, latent_dim), initial MSE, final MSE).
    """
    x = _ae_input(sample)
    D = x.shape[1]
    rng = np.random.default_rng(seed)
    lim_e = np.sqrt(6.0 / (D + latent_dim))
    params = {
        "enc_w": Parameter("enc_w", rng.uniform(-lim_e, lim_e, (D, latent_dim))),
        "enc_b": Parameter("enc_b", np.zeros(latent_dim)),
        "dec_w": Parameter("dec_w", rng.uniform(-lim_e, lim_e, (latent_dim, D))),
        "dec_b": Parameter("dec_b", np.zeros(D)),
    }
    X = Tensor(x)
    plist = list(params.values())

    def loss_fn():
        s = sigmoid(linear(X, params["enc_w"].tensor, params["enc_b"].tensor))
        rec = linear(s, params["dec_w"].tensor, params["dec_b"].tensor)
        return square(rec - X).mean(), s

    first = None
    for _ in range(epochs):
        zero_grad(plist)
        loss, _ = loss_fn()
        first = float(loss.data) if first is None else first
        loss.backward()
        for p in plist:
            p.value = p.value - lr * p.grad
    zero_grad(plist)
    loss, s = loss_fn()
    final = float(loss.data)
    return {k: p.value.copy() for k, p in params.items()}, s.data.copy(), first if first is not None else final, final


def build_prompt(latent: np.ndarray, d_p: int, mode: str = "node", seed: int | np.random.SeedSequence = 0) -> np.ndarray:
    """Seeded bias-free projection of the latent to prompt width."""
    d_e = latent.shape[-1]
    proj = np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(d_e), (d_e, d_p))
    prompt = latent @ proj
    return prompt if mode == "node" else prompt.mean(axis=0)


def build_task_prompt(data: TaskData, model_config: ModelConfig, config: RoAdaConfig) -> TaskPromptArtifact:
    """Daily-average sample of the training range -> autoencoder -> prompt."""
    tr0, tr1 = data.split.ranges["train"]
    sample = daily_average_sample(data.dataset, tr0, tr1)
    params, latent, mse0, mse1 = train_autoencoder(
        sample, config.latent_dim, config.ae_epochs, config.ae_lr, derive_seed(config.seed, "ae", data.name)
    )
    prompt = build_prompt(latent, model_config.d_p, model_config.prompt_mode,
                          derive_seed(config.seed, "prompt", data.name))
    return TaskPromptArtifact(data.name, sample, params["enc_w"], params["enc_b"], params["dec_w"],
                              params["dec_b"], latent, prompt, mse0, mse1)


# ---------------------------------------------------------------------------
# snapshots and freezing
# ---------------------------------------------------------------------------


class SnapshotHistory:
    """Copies of the shared weights, one per recorded point."""

    def __init__(self):
        self.snapshots: list[dict[str, np.ndarray]] = []

    def append(self, values: Mapping[str, np.ndarray]) -> None:
        self.snapshots.append({k: np.array(v, dtype=np.float64, copy=True) for k, v in values.items()})

    def reset(self, values: Mapping[str, np.ndarray]) -> None:
        self.snapshots = []
        self.append(values)

    def __len__(self) -> int:
        return len(self.snapshots)

    @property
    def names(self) -> list[str]:
        return list(self.snapshots[0]) if self.snapshots else []


@dataclass
class FreezeEntry:
    variance: np.ndarray
    stable: np.ndarray

    @property
    def stable_fraction(self) -> float:
        return float(self.stable.mean()) if self.stable.size else 0.0


@dataclass
class FreezeReport:
    threshold: float
    history_length: int
    entries: dict[str, FreezeEntry]
    phase: str = ""
    task: str = ""
    frozen_fraction: float = 0.0  # cumulative, after applying

    @property
    def stable_fraction(self) -> float:
        total = sum(e.stable.size for e in self.entries.values())
        return sum(int(e.stable.sum()) for e in self.entries.values()) / total if total else 0.0

    def histogram(self) -> dict:
        allv = np.concatenate([e.variance.ravel() for e in self.entries.values()]) if self.entries else np.zeros(0)
        counts, _ = np.histogram(np.clip(allv, HIST_EDGES[0], HIST_EDGES[-1]), bins=HIST_EDGES)
        return {"edges": HIST_EDGES.tolist(), "counts": counts.tolist()}

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "task": self.task,
            "threshold": self.threshold,
            "history_length": self.history_length,
            "stable_fraction": self.stable_fraction,
            "frozen_fraction": self.frozen_fraction,
            "variance_histogram": self.histogram(),
            "parameters": {
                name: {"size": int(e.stable.size), "stable_fraction": e.stable_fraction}
                for name, e in self.entries.items()
            },
        }


def variance_partition(history: SnapshotHistory | Sequence[Mapping[str, np.ndarray]], threshold: float = 1e-6) -> FreezeReport:
    """Per-element population variance over snapshots; stable iff var < threshold."""
    snaps = history.snapshots if isinstance(history, SnapshotHistory) else list(history)
    if len(snaps) < 2:
        raise ValueError(f"need at least 2 snapshots, got {len(snaps)}")
    names = list(snaps[0])
    entries = {}
    for name in names:
        arrs = []
        for j, s in enumerate(snaps):
            if name not in s:
                raise KeyError(f"snapshot {j} lacks parameter {name!r}")
            a = np.asarray(s[name], dtype=np.float64)
            if a.shape != np.shape(snaps[0][name]):
                raise ValueError(f"{name}: snapshot {j} shape {a.shape} != {np.shape(snaps[0][name])}")
            arrs.append(a)
        var = np.var(np.stack(arrs), axis=0)
        entries[name] = FreezeEntry(var, var < threshold)
    return FreezeReport(threshold, len(snaps), entries)


def apply_freeze(params: Mapping[str, Parameter], report: FreezeReport, mode: str = "element") -> int:
    """OR stable elements into the freeze masks; returns newly frozen count.

    Prompt parameters are never frozen. In ``per_tensor`` mode a whole tensor
    freezes when its mean element variance is below the threshold.
    """
    if mode not in ("element", "per_tensor"):
        raise ValueError("mode must be 'element' or 'per_tensor'")
    newly = 0
    for name, entry in report.entries.items():
        if name.startswith("prompt/"):
            continue
        if name not in params:
            raise KeyError(f"freeze report names unknown parameter {name!r}")
        p = params[name]
        if entry.stable.shape != p.shape:
            raise ValueError(f"{name}: report shape {entry.stable.shape} != parameter {p.shape}")
        if mode == "element":
            stable = entry.stable
        else:
            stable = np.full(p.shape, bool(entry.variance.mean() < report.threshold))
        before = int(p.freeze_mask.sum())
        p.freeze_mask = p.freeze_mask | stable
        newly += int(p.freeze_mask.sum()) - before
    return newly


def frozen_fraction(params: Iterable[Parameter]) -> float:
    params = list(params)
    total = sum(p.freeze_mask.size for p in params)
    return sum(int(p.freeze_mask.sum()) for p in params) / total if total else 0.0


# ---------------------------------------------------------------------------
# warm-up and refinement
# ---------------------------------------------------------------------------


def _shared_values(model: MSTIModel) -> dict[str, np.ndarray]:
    return {name: p.value for name, p in model.params.items()}


@dataclass
class WarmupResult:
    shared_state: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    freeze_reports: list[FreezeReport]
    phases: list[dict]
    epoch_logs: list[dict]
    attention: list[tuple[str, list[dict]]] = field(default_factory=list)


def _train_config(config: RoAdaConfig, max_epochs: int) -> TrainConfig:
    return TrainConfig(lr=config.lr, weight_decay=config.weight_decay, patience=min(config.patience, max_epochs),
                       max_epochs=max_epochs, seed=config.seed)


def _log_rows(records: list[EpochRecord], phase: str, task: str) -> list[dict]:
    return [dict(task=task, phase=phase, **r.__dict__) for r in records]


def warmup_rolling(model: MSTIModel, data: Sequence[TaskData], config: RoAdaConfig,
                   probe: TaskData | None = None, observer=None) -> WarmupResult:
    """Task 1 to convergence, then each later task and task 1 again at a reduced rate.

    After every rolling phase the snapshot history (carried-in weights plus
    one snapshot per epoch) is partitioned by variance and stable elements
    are frozen for all later phases. ``observer(phase, epoch, model)`` is
    called with epoch 0 at the start of each phase and after every epoch.
    """
    reports, phases, logs, attention = [], [], [], []
    probe = probe or data[0]
    first = data[0]

    def export(label):
        attention.append((label, attention_records(model, probe, probe.name)))

    def watch(label):
        return None if observer is None else (lambda epoch, m: observer(label, epoch, m))

    if observer is not None:
        observer("warmup/1", 0, model)
    cfg = _train_config(config, config.max_epochs_warmup)
    _, records = train_until_convergence(model, first, first.name, cfg, phase="warmup/1",
                                         on_epoch=watch("warmup/1"))
    logs += _log_rows(records, "warmup/1", first.name)
    phases.append({"phase": "warmup/1", "task": first.name, "lr": config.lr, "epochs": len(records) - 1,
                   "history_length": 1, "frozen_fraction": frozen_fraction(model.params.values())})
    export("warmup/1")

    history = SnapshotHistory()
    history.reset(_shared_values(model))
    rolling = list(data[1:]) + [first]
    lr = config.lr * config.rolling_lr_factor
    rcfg = _train_config(config, config.max_epochs_rolling)
    for i, td in enumerate(rolling, start=2):
        label = f"warmup/{i}" if i <= len(data) else "warmup/revisit"

        def record(epoch, m, history=history, label=label):
            history.append(_shared_values(m))
            if observer is not None:
                observer(label, epoch, m)

        if observer is not None:
            observer(label, 0, model)
        _, records = train_until_convergence(model, td, td.name, rcfg, lr=lr, phase=label, on_epoch=record)
        logs += _log_rows(records, label, td.name)
        epochs = len(records) - 1
        hist_len = len(history)
        report = variance_partition(history, config.variance_threshold)
        if config.freeze:
            apply_freeze(model.params, report, config.freeze_mode)
        report.phase, report.task = label, td.name
        report.frozen_fraction = frozen_fraction(model.params.values())
        reports.append(report)
        phases.append({"phase": label, "task": td.name, "lr": lr, "epochs": epochs, "history_length": hist_len,
                       "stable_fraction": report.stable_fraction, "frozen_fraction": report.frozen_fraction})
        log.info("%s %s: %d epochs, stable %.4f, frozen %.4f", label, td.name, epochs,
                 report.stable_fraction, report.frozen_fraction)
        history.reset(_shared_values(model))
        export(label)

    return WarmupResult({k: v.copy() for k, v in _shared_values(model).items()}, model.masks(), reports,
                        phases, logs, attention)


def refine(model: MSTIModel, td: TaskData, shared_state: Mapping[str, np.ndarray], config: RoAdaConfig):
    """Fine-tune a copy of the consolidated weights plus the task prompt at the full rate."""
    model.load_state(shared_state)
    saved_masks = None
    if config.refine_unfrozen:
        saved_masks = model.masks()
        for p in model.params.values():
            p.freeze_mask = np.zeros(p.shape, dtype=bool)
    try:
        cfg = _train_config(config, config.max_epochs_refine)
        _, records = train_until_convergence(model, td, td.name, cfg, phase=f"refine/{td.name}")
    finally:
        if saved_masks is not None:
            for name, m in saved_masks.items():
                model.params[name].freeze_mask = m
    return records


def roada_full(datasets: Sequence[STDataset], config: ExperimentConfig, variant: str | None = None) -> ExperimentResult:
    """Prompts, rolling warm-up and per-task refinement; one evaluated model per task.

    ``variant`` selects an ablation: ``no_interaction`` drops the cross
    interactions, ``no_freeze`` records snapshots but never freezes,
    ``no_prompt`` uses fixed zero prompts.
    """
    t0 = time.perf_counter()
    rcfg = config.roada
    if variant == "no_freeze":
        rcfg = replace(rcfg, freeze=False)
    data = [TaskData(d, config.input_len, config.horizon, config.stride) for d in datasets]
    names = [d.name for d in data]
    if len(set(names)) != len(names):
        raise DatasetError(f"task names must be unique: {names}")
    if rcfg.task_order:
        unknown = set(rcfg.task_order) - set(names)
        if unknown or len(rcfg.task_order) != len(names):
            raise ValueError(f"task_order {rcfg.task_order} must be a permutation of {names}")
        data = [data[names.index(n)] for n in rcfg.task_order]
    overrides = {"use_cross": False} if variant == "no_interaction" else {}
    mcfg = model_config_for(config, data, **overrides)
    model = MSTIModel(mcfg, seed=int(derive_seed(config.seed, "init").generate_state(1)[0]))
    artifacts = {}
    for td in data:
        if variant == "no_prompt":
            model.set_prompt(td.name, np.zeros(model.prompt_shape), trainable=False)
        else:
            artifacts[td.name] = build_task_prompt(td, mcfg, rcfg)
            model.set_prompt(td.name, artifacts[td.name].prompt_init)

    warm = warmup_rolling(model, data, rcfg)
    metrics, task_models, logs = [], [], list(warm.epoch_logs)
    for td in data:
        start = time.perf_counter()
        records = refine(model, td, warm.shared_state, rcfg)
        logs += _log_rows(records, f"refine/{td.name}", td.name)
        report = evaluate(model, td, td.name, "test")
        wall = None if config.deterministic else time.perf_counter() - start
        metrics.append(_metric_row(report, "roada" if variant is None else f"ablation:{variant}",
                                   config.seed, len(records) - 1, wall))
        task_models.append(snapshot_task_model(model, td.name, td))
    run_log = {
        "task_order": [td.name for td in data],
        "variant": variant or "full",
        "phases": warm.phases,
        "autoencoder": {k: {"mse_initial": a.mse_initial, "mse_final": a.mse_final} for k, a in artifacts.items()},
    }
    return ExperimentResult("roada" if variant is None else "ablation", variant or "full", config.seed, metrics,
                            task_models, logs, warm.freeze_reports, run_log, warm.attention,
                            time.perf_counter() - t0)
