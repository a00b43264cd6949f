"""JSON run configuration: schema, defaults and conversion to experiment settings."""

from __future__ import annotations

import json
import os
from dataclasses import fields
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import STDataset, generate_synthetic, load_dataset
from .harness import ABLATIONS, ExperimentConfig, TrainConfig, sparsity_transform
from .msti import ModelConfig
from .roada import RoAdaConfig

OUTPUT_ROOT_ENV = "CMUST_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSpec(_Strict):
    seed: int = 0
    tasks: int = Field(3, ge=1)
    nodes: int = Field(16, ge=1)
    steps: int = Field(1344, ge=1)
    interval: int = Field(15, gt=0)
    coupling: float = Field(1.0, ge=0.0, le=1.0)
    noise: float = Field(0.1, ge=0.0)


class DataSection(_Strict):
    paths: Optional[list[str]] = None
    synthetic: Optional[SyntheticSpec] = None
    node_fraction: Optional[float] = Field(None, gt=0.0, le=1.0)
    interval_multiplier: Optional[int] = Field(None, ge=1)
    input_len: int = Field(12, ge=1)
    horizon: int = Field(12, ge=1)
    stride: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.paths is None) == (self.synthetic is None):
            raise ValueError("data needs exactly one of 'paths' or 'synthetic'")
        if self.paths is not None and not self.paths:
            raise ValueError("data.paths is empty")
        return self


class TrainSection(_Strict):
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(3e-4, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    batch_size: int = Field(16, ge=1)
    patience: int = Field(5, ge=1)
    max_epochs: int = Field(20, ge=1)
    huber_delta: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _patience(self):
        if self.patience > self.max_epochs:
            raise ValueError("train.patience must not exceed train.max_epochs")
        return self


class RoAdaSection(_Strict):
    variance_threshold: float = Field(1e-6, gt=0)
    lr: float = Field(1e-3, gt=0)
    rolling_lr_factor: float = Field(0.01, gt=0, le=1)
    weight_decay: float = Field(3e-4, ge=0)
    patience: int = Field(5, ge=1)
    max_epochs_warmup: int = Field(20, ge=1)
    max_epochs_rolling: int = Field(3, ge=1)
    max_epochs_refine: int = Field(10, ge=1)
    task_order: Optional[list[str]] = None
    freeze_mode: Literal["element", "per_tensor"] = "element"
    refine_unfrozen: bool = False
    latent_dim: int = Field(16, ge=1)
    ae_epochs: int = Field(500, ge=1)
    ae_lr: float = Field(1.0, gt=0)


class AblationSection(_Strict):
    variants: list[Literal["no_interaction", "no_freeze", "no_prompt"]] = Field(default_factory=list)


class SweepSection(_Strict):
    d_p: list[int] = Field(default_factory=lambda: [18, 36, 72, 144])
    heads: list[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16])
    variance_threshold: list[float] = Field(default_factory=lambda: [1e-4, 1e-5, 1e-6, 1e-7])


class RunConfig(_Strict):
    mode: Literal["single", "roada", "ablation"] = "roada"
    profile: Literal["tiny", "full"] = "tiny"
    model: dict[str, int | float | bool | str] = Field(default_factory=dict)
    seed: int = 0
    deterministic: bool = True
    data: DataSection
    train: TrainSection = Field(default_factory=TrainSection)
    roada: RoAdaSection = Field(default_factory=RoAdaSection)
    ablation: AblationSection = Field(default_factory=AblationSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _model_keys(self):
        known = {f.name for f in fields(ModelConfig)}
        fixed = {"num_nodes", "c_in", "slots_per_day", "input_len", "horizon"}
        bad = set(self.model) - (known - fixed)
        if bad:
            raise ValueError(f"unknown or data-derived model keys: {sorted(bad)}")
        return self


def parse_run_config(obj: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(obj)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path: str | os.PathLike) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_run_config(obj)


def resolve_output_dir(run: RunConfig, override: str | None = None) -> Path:
    """Explicit override, then ``output_dir`` (relative to $CMUST_OUTPUT_ROOT), then ./runs."""
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
    if override is not None:
        return Path(override)
    if run.output_dir is not None:
        return root / run.output_dir
    return root / "runs" / f"{run.mode}-seed{run.seed}"


def to_experiment(run: RunConfig) -> ExperimentConfig:
    t = run.train
    r = run.roada
    train = TrainConfig(lr=t.lr, weight_decay=t.weight_decay, betas=tuple(t.betas), eps=t.eps,
                        batch_size=t.batch_size, patience=t.patience, max_epochs=t.max_epochs,
                        seed=run.seed, huber_delta=t.huber_delta, profile=run.profile)
    roada = RoAdaConfig(**r.model_dump(), seed=run.seed)
    return ExperimentConfig(
        profile=run.profile,
        model_overrides=dict(run.model),
        train=train,
        roada=roada,
        seed=run.seed,
        input_len=run.data.input_len,
        horizon=run.data.horizon,
        stride=run.data.stride,
        ablations=list(run.ablation.variants),
        deterministic=run.deterministic,
    )


def load_datasets(run: RunConfig) -> list[STDataset]:
    d = run.data
    if d.synthetic is not None:
        s = d.synthetic
        sets = generate_synthetic(s.seed, s.tasks, s.nodes, s.steps, s.interval, s.coupling, s.noise)
    else:
        sets = [load_dataset(p) for p in d.paths]
    if d.node_fraction is not None or d.interval_multiplier is not None:
        sets = [sparsity_transform(ds, d.node_fraction, d.interval_multiplier, seed=run.seed) for ds in sets]
    return sets


__all__ = [
    "ABLATIONS", "ConfigError", "RunConfig", "OUTPUT_ROOT_ENV", "load_run_config", "parse_run_config",
    "resolve_output_dir", "to_experiment", "load_datasets",
]
