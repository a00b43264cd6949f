"""Integrated representation: observation | spatial | temporal | prompt."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .numerics import Tensor, broadcast_to, concat, embedding, linear, relu

TEMPORAL_SUBWIDTH = 16
TS_DIM = 6


@dataclass(frozen=True)
class SliceLayout:
    d_obs: int
    d_s: int
    d_t: int
    d_p: int

    def __post_init__(self):
        if min(self.d_obs, self.d_s, self.d_t, self.d_p) <= 0:
            raise ValueError("all slice widths must be positive")

    @property
    def d_h(self) -> int:
        return self.d_obs + self.d_s + self.d_t + self.d_p

    @property
    def widths(self) -> dict[str, int]:
        return {"o": self.d_obs, "s": self.d_s, "t": self.d_t, "p": self.d_p}

    @property
    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for key, w in self.widths.items():
            out[key] = slice(start, start + w)
            start += w
        return out

    def __getitem__(self, key: str) -> slice:
        return self.slices[key]


@dataclass
class IntegratedRepresentation:
    H: Tensor  # B x T x N x d_h
    layout: SliceLayout

    def __post_init__(self):
        if self.H.shape[-1] != self.layout.d_h:
            raise ValueError(f"H width {self.H.shape[-1]} != layout d_h {self.layout.d_h}")

    def slice(self, key: str) -> Tensor:
        return self.H[..., self.layout[key]]


def embed_observations(x, p: Mapping[str, Tensor]) -> Tensor:
    """ObsMLP: linear(C->h_obs), ReLU, linear(h_obs->d_obs) per (b, t, n)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    c_in = p["embed/obs/w1"].shape[0]
    if x.shape[-1] != c_in:
        raise ValueError(f"observation channels {x.shape[-1]} != configured C={c_in}")
    h = relu(linear(x, p["embed/obs/w1"], p["embed/obs/b1"]))
    return linear(h, p["embed/obs/w2"], p["embed/obs/b2"])


def embed_spatial(coords, p: Mapping[str, Tensor]) -> Tensor:
    """SpatialMLP: one linear map of min-max normalised (lon, lat) -> d_s."""
    c = coords if isinstance(coords, Tensor) else Tensor(coords)
    return linear(c, p["embed/spatial/w"], p["embed/spatial/b"])


def embed_temporal(tod, dow, ts, p: Mapping[str, Tensor]) -> Tensor:
    """Lookup(dow) | lookup(tod) | linear(ts), then linear 48 -> d_t.

    Indicator arrays are (B, T); ``ts`` is (B, T, 6). Returns (B, T, d_t);
    callers broadcast over nodes.
    """
    e_dow = embedding(p["embed/temporal/dow"], dow)
    e_tod = embedding(p["embed/temporal/tod"], tod)
    e_ts = linear(Tensor(ts), p["embed/temporal/ts_w"], p["embed/temporal/ts_b"])
    return linear(concat([e_dow, e_tod, e_ts], axis=-1), p["embed/temporal/w"], p["embed/temporal/b"])


def assemble_representation(
    e_obs: Tensor, e_s: Tensor, e_t: Tensor, prompt: Tensor, layout: SliceLayout
) -> IntegratedRepresentation:
    """Concatenate the four segments along features in layout order.

    ``e_s`` may be (N, d_s), ``e_t`` (B, T, d_t) and ``prompt`` (N, d_p) or
    (d_p,); all are broadcast to (B, T, N, .).
    """
    B, T, N, d_obs = e_obs.shape
    want = layout.widths
    got = {"o": d_obs, "s": e_s.shape[-1], "t": e_t.shape[-1], "p": prompt.shape[-1]}
    if got != want:
        raise ValueError(f"segment widths {got} do not match layout {want}")
    if e_t.ndim == 3:
        e_t = e_t.reshape(B, T, 1, want["t"])
    parts = [
        e_obs,
        broadcast_to(e_s, (B, T, N, want["s"])),
        broadcast_to(e_t, (B, T, N, want["t"])),
        broadcast_to(prompt, (B, T, N, want["p"])),
    ]
    return IntegratedRepresentation(concat(parts, axis=-1), layout)


def embedding_param_shapes(c_in: int, h_obs: int, layout: SliceLayout, slots_per_day: int) -> dict[str, tuple]:
    w = TEMPORAL_SUBWIDTH
    return {
        "embed/obs/w1": (c_in, h_obs),
        "embed/obs/b1": (h_obs,),
        "embed/obs/w2": (h_obs, layout.d_obs),
        "embed/obs/b2": (layout.d_obs,),
        "embed/spatial/w": (2, layout.d_s),
        "embed/spatial/b": (layout.d_s,),
        "embed/temporal/dow": (7, w),
        "embed/temporal/tod": (slots_per_day, w),
        "embed/temporal/ts_w": (TS_DIM, w),
        "embed/temporal/ts_b": (w,),
        "embed/temporal/w": (3 * w, layout.d_t),
        "embed/temporal/b": (layout.d_t,),
    }


def is_lookup_table(name: str) -> bool:
    return name in ("embed/temporal/dow", "embed/temporal/tod")


def init_array(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform matrices, N(0, 0.1) lookup tables, zero biases, unit LN gains."""
    leaf = name.rsplit("/", 1)[-1]
    if is_lookup_table(name):
        return rng.normal(0.0, 0.1, size=shape)
    if leaf.endswith("_g"):
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
