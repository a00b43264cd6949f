"""Dataset format, synthetic generator, normalisation, windowing and splits.

A dataset directory holds ``manifest.json`` and ``observations.csv``; the CSV
has one row per time step, header ``t,node0_ch0,node0_ch1,...`` with columns
flattened node-major then channel.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .io import atomic_write_json, atomic_write_text

STD_FLOOR = 1e-8


class DatasetError(ValueError):
    pass


def parse_timestamp(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


@dataclass
class DatasetManifest:
    name: str
    T_all: int
    N: int
    C: int
    interval_minutes: int
    start_timestamp: str
    coords: list[list[float]]
    channel_names: list[str]

    def __post_init__(self):
        if self.interval_minutes <= 0 or 1440 % self.interval_minutes:
            raise DatasetError(f"interval_minutes={self.interval_minutes} must divide 1440")
        if min(self.T_all, self.N, self.C) <= 0:
            raise DatasetError("T_all, N and C must be positive")
        if len(self.coords) != self.N:
            raise DatasetError(f"{len(self.coords)} coordinate pairs for N={self.N} nodes")
        arr = np.asarray(self.coords, dtype=float)
        if arr.shape != (self.N, 2) or not np.isfinite(arr).all():
            raise DatasetError("coords must be N finite (lon, lat) pairs")
        if len(self.channel_names) != self.C:
            raise DatasetError(f"{len(self.channel_names)} channel names for C={self.C}")
        parse_timestamp(self.start_timestamp)

    @property
    def slots_per_day(self) -> int:
        return 1440 // self.interval_minutes

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class STDataset:
    manifest: DatasetManifest
    observations: np.ndarray  # T_all x N x C

    def __post_init__(self):
        m = self.manifest
        self.observations = np.asarray(self.observations, dtype=np.float64)
        if self.observations.shape != (m.T_all, m.N, m.C):
            raise DatasetError(
                f"observations shape {self.observations.shape} != manifest {(m.T_all, m.N, m.C)}"
            )
        if not np.isfinite(self.observations).all():
            raise DatasetError("observations contain non-finite values")

    @property
    def name(self) -> str:
        return self.manifest.name


# ---------------------------------------------------------------------------
# portable format
# ---------------------------------------------------------------------------


def _csv_text(ds: STDataset) -> str:
    m = ds.manifest
    header = ["t"] + [f"node{n}_ch{c}" for n in range(m.N) for c in range(m.C)]
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    flat = ds.observations.reshape(m.T_all, m.N * m.C)
    for t, row in enumerate(flat):
        buf.write(str(t) + "," + ",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def save_dataset(ds: STDataset, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    atomic_write_json(path / "manifest.json", ds.manifest.to_dict())
    atomic_write_text(path / "observations.csv", _csv_text(ds))
    return path


def load_dataset(path: str | os.PathLike) -> STDataset:
    path = Path(path)
    man_file, obs_file = path / "manifest.json", path / "observations.csv"
    for f in (man_file, obs_file):
        if not f.exists():
            raise DatasetError(f"missing file: {f}")
    manifest = DatasetManifest(**json.loads(man_file.read_text(encoding="utf-8")))
    width = manifest.N * manifest.C
    rows: list[list[float]] = []
    with obs_file.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != width + 1:
            raise DatasetError(f"header has {0 if header is None else len(header)} columns, expected {width + 1}")
        for r, row in enumerate(reader):
            if len(row) != width + 1:
                raise DatasetError(f"row {r}: {len(row)} columns, expected {width + 1}")
            vals = []
            for c, cell in enumerate(row[1:]):
                v = float(cell)
                if not math.isfinite(v):
                    raise DatasetError(f"non-finite value at row {r}, column {c + 1} ({header[c + 1]})")
                vals.append(v)
            rows.append(vals)
    if len(rows) != manifest.T_all:
        raise DatasetError(f"observations.csv has {len(rows)} rows but manifest T_all={manifest.T_all}")
    obs = np.asarray(rows, dtype=np.float64).reshape(manifest.T_all, manifest.N, manifest.C)
    return STDataset(manifest, obs)


# ---------------------------------------------------------------------------
# synthetic multi-task generator
# ---------------------------------------------------------------------------


def grid_coords(N: int, lon0: float = -74.0, lat0: float = 40.70, step: float = 0.01) -> np.ndarray:
    nx = int(math.ceil(math.sqrt(N)))
    idx = np.arange(N)
    return np.stack([lon0 + step * (idx % nx), lat0 + step * (idx // nx)], axis=1)


def generate_synthetic(
    seed: int,
    K: int,
    N: int,
    T_all: int,
    interval_minutes: int = 30,
    coupling: float = 1.0,
    noise_sd: float = 0.1,
    start_timestamp: str = "2024-01-01T00:00:00Z",
) -> list[STDataset]:
    """K correlated single-channel tasks over a shared latent field.

    Latent: daily sinusoid (node-dependent phase) + weekly sinusoid + a smooth
    spatial gradient. Task k is ``a_k * (latent + (1 - coupling) * pert_k) + b_k``
    plus Gaussian noise, where ``pert_k`` is a smooth task-specific field.
    """
    if K < 1 or N < 1 or T_all < 1:
        raise DatasetError("K, N and T_all must be >= 1")
    if not 0.0 <= coupling <= 1.0:
        raise DatasetError("coupling must lie in [0, 1]")
    if noise_sd < 0:
        raise DatasetError("noise_sd must be non-negative")
    if interval_minutes <= 0 or 1440 % interval_minutes:
        raise DatasetError(f"interval_minutes={interval_minutes} must divide 1440")

    rng = np.random.default_rng(seed)
    coords = grid_coords(N)
    span = np.ptp(coords, axis=0)
    span[span == 0] = 1.0
    u, v = ((coords - coords.min(axis=0)) / span).T

    L_t = 1440 // interval_minutes
    t = np.arange(T_all, dtype=np.float64)[:, None]
    phase = 0.5 * np.pi * u
    latent = (
        np.sin(2 * np.pi * t / L_t + phase)
        + 0.5 * np.sin(2 * np.pi * t / (7 * L_t))
        + 0.5 * (u + v)
    )
    out = []
    for k in range(K):
        a = rng.uniform(1.0, 2.0)
        b = rng.uniform(3.0, 6.0)
        psi = rng.uniform(0.0, 2 * np.pi)
        pert = np.sin(4 * np.pi * t / L_t + psi + np.pi * v) + 0.5 * np.cos(np.pi * (u - v) + psi)
        noise = rng.normal(0.0, noise_sd, size=(T_all, N)) if noise_sd > 0 else np.zeros((T_all, N))
        obs = a * (latent + (1.0 - coupling) * pert) + b + noise
        manifest = DatasetManifest(
            name=f"task{k}",
            T_all=T_all,
            N=N,
            C=1,
            interval_minutes=interval_minutes,
            start_timestamp=start_timestamp,
            coords=coords.tolist(),
            channel_names=["value"],
        )
        out.append(STDataset(manifest, obs[:, :, None]))
    return out


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def compute_norm_stats(train_slice: np.ndarray) -> NormStats:
    """Per-channel mean and population std over every axis but the last."""
    x = np.asarray(train_slice, dtype=np.float64)
    axes = tuple(range(x.ndim - 1))
    mean = x.mean(axis=axes)
    std = np.maximum(x.std(axis=axes), STD_FLOOR)
    return NormStats(mean, std)


def normalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def denormalize(z: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# splits and windows
# ---------------------------------------------------------------------------


def split_7_1_2(T_all: int, input_len: int | None = None, horizon: int | None = None):
    """Chronological train/val/test ``(start, end)`` ranges.

    Train and val lengths are floored; test takes the remainder. When
    ``input_len``/``horizon`` are given every split must hold one window.
    """
    n_train = int(math.floor(0.7 * T_all))
    n_val = int(math.floor(0.1 * T_all))
    ranges = ((0, n_train), (n_train, n_train + n_val), (n_train + n_val, T_all))
    if input_len is not None and horizon is not None:
        need = input_len + horizon
        for label, (a, b) in zip(("train", "val", "test"), ranges):
            if b - a < need:
                raise DatasetError(f"{label} split has {b - a} steps; one window needs {need}")
    return ranges


def make_windows(range_len: int, T: int = 12, T_out: int = 12, stride: int = 1) -> np.ndarray:
    """Start offsets of every (input, target) window inside a range."""
    if stride < 1:
        raise DatasetError("stride must be >= 1")
    if range_len < T + T_out:
        raise DatasetError(f"range of {range_len} steps is shorter than one window ({T + T_out})")
    return np.arange(0, range_len - (T + T_out) + 1, stride)


@dataclass
class WindowedSplit:
    input_len: int
    horizon: int
    stride: int
    ranges: dict[str, tuple[int, int]]
    windows: dict[str, np.ndarray] = field(repr=False)

    @classmethod
    def build(cls, T_all: int, input_len: int = 12, horizon: int = 12, stride: int = 1) -> WindowedSplit:
        tr, va, te = split_7_1_2(T_all, input_len, horizon)
        ranges = {"train": tr, "val": va, "test": te}
        windows = {
            k: a + make_windows(b - a, input_len, horizon, stride) for k, (a, b) in ranges.items()
        }
        return cls(input_len, horizon, stride, ranges, windows)


# ---------------------------------------------------------------------------
# temporal indicators
# ---------------------------------------------------------------------------


def temporal_indicators(manifest: DatasetManifest, t: int) -> tuple[int, int, np.ndarray]:
    """(time-of-day slot, day-of-week with Monday=0, six-vector timestamp)."""
    start = parse_timestamp(manifest.start_timestamp)
    when = start + timedelta(minutes=manifest.interval_minutes * int(t))
    minutes = when.hour * 60 + when.minute
    tod = minutes // manifest.interval_minutes
    dow = when.weekday()
    ts = np.array(
        [when.month / 12, when.day / 31, when.weekday() / 7, when.hour / 24, when.minute / 60, when.second / 60]
    )
    return tod, dow, ts


def temporal_table(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Indicators for every step 0..T_all-1 as arrays (tod, dow, ts)."""
    T = manifest.T_all
    tod = np.empty(T, dtype=np.int64)
    dow = np.empty(T, dtype=np.int64)
    ts = np.empty((T, 6), dtype=np.float64)
    for t in range(T):
        tod[t], dow[t], ts[t] = temporal_indicators(manifest, t)
    return tod, dow, ts


def normalized_coords(coords) -> np.ndarray:
    """Min-max scale each coordinate axis to [0, 1] over the node set."""
    c = np.asarray(coords, dtype=np.float64)
    if not np.isfinite(c).all():
        raise DatasetError("non-finite coordinates")
    lo, span = c.min(axis=0), np.ptp(c, axis=0)
    span = np.where(span > 0, span, 1.0)
    return (c - lo) / span


# ---------------------------------------------------------------------------
# per-task bundle used by training
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    x: np.ndarray  # B x T x N x C, normalised
    tod: np.ndarray  # B x T
    dow: np.ndarray  # B x T
    ts: np.ndarray  # B x T x 6
    y: np.ndarray  # B x T' x N x 1, normalised target channel
    y_raw: np.ndarray  # B x T' x N x 1, original scale


class TaskData:
    """A dataset prepared for windowed training: stats, indicators, splits."""

    def __init__(self, dataset: STDataset, input_len: int = 12, horizon: int = 12, stride: int = 1,
                 stats: NormStats | None = None):
        self.dataset = dataset
        m = dataset.manifest
        self.name = m.name
        self.split = WindowedSplit.build(m.T_all, input_len, horizon, stride)
        tr0, tr1 = self.split.ranges["train"]
        if stats is None:
            stats = compute_norm_stats(dataset.observations[tr0:tr1])
        elif stats.mean.shape != (m.C,) or stats.std.shape != (m.C,):
            raise DatasetError(f"normalisation stats cover {stats.mean.shape[0]} channels, dataset has {m.C}")
        self.stats = stats
        self.z = normalize(dataset.observations, self.stats)
        self.tod, self.dow, self.ts = temporal_table(m)
        self.coords = normalized_coords(m.coords)
        self.input_len = input_len
        self.horizon = horizon

    @property
    def manifest(self) -> DatasetManifest:
        return self.dataset.manifest

    def batch(self, starts) -> Batch:
        starts = np.asarray(starts, dtype=np.int64)
        T, Tp = self.input_len, self.horizon
        xi = starts[:, None] + np.arange(T)
        yi = starts[:, None] + T + np.arange(Tp)
        return Batch(
            x=self.z[xi],
            tod=self.tod[xi],
            dow=self.dow[xi],
            ts=self.ts[xi],
            y=self.z[yi][..., :1],
            y_raw=self.dataset.observations[yi][..., :1],
        )
