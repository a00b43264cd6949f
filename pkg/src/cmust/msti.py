"""Multi-dimensional spatio-temporal interaction network.

Pipeline per block: spatial-context cross interaction (sequence = nodes),
transpose, temporal-context cross interaction with sinusoidal positions
(sequence = steps), temporal self interaction, transpose back, spatial self
interaction. A 1x1 fusion of the observation/spatial/temporal slices plus the
prompt slice feeds a per-node regression head over the flattened time axis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from .data import Batch
from .embedding import (
    SliceLayout,
    assemble_representation,
    embed_observations,
    embed_spatial,
    embed_temporal,
    embedding_param_shapes,
    init_array,
)
from .numerics import Parameter, Tensor, concat, layer_norm, linear, matmul, relu, softmax

CROSS_STAGES = (("SCCI-so", "s", "o"), ("SCCI-os", "o", "s"))
TEMPORAL_CROSS_STAGES = (("TCCI-to", "t", "o"), ("TCCI-ot", "o", "t"))
_CROSS_KEYS = {st: (a, b) for st, a, b in CROSS_STAGES + TEMPORAL_CROSS_STAGES}
_ATTN_LEAVES = ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln2_g", "ln2_b")
STAGES = ("SCCI-so", "SCCI-os", "TCCI-to", "TCCI-ot", "TSI", "SSI")
STAGE_AXIS = {"SCCI-so": "spatial", "SCCI-os": "spatial", "TCCI-to": "temporal",
              "TCCI-ot": "temporal", "TSI": "temporal", "SSI": "spatial"}


@dataclass
class ModelConfig:
    d_obs: int = 8
    d_s: int = 4
    d_t: int = 12
    d_p: int = 8
    h_obs: int = 16
    d_cross: int = 8
    d_self: int = 32
    heads: int = 2
    ffn_hidden: int = 32
    blocks: int = 1
    d_f: int = 8
    d_y: int = 8
    input_len: int = 12
    horizon: int = 12
    c_in: int = 1
    c_out: int = 1
    num_nodes: int = 4
    slots_per_day: int = 48
    ln_eps: float = 1e-5
    use_cross: bool = True
    tcci_reverse: bool = True
    positional_encoding: bool = True
    prompt_mode: str = "node"

    def __post_init__(self):
        for name in ("d_cross", "d_self"):
            if getattr(self, name) % self.heads:
                raise ValueError(f"{name}={getattr(self, name)} is not divisible by heads={self.heads}")
        if self.prompt_mode not in ("node", "global"):
            raise ValueError("prompt_mode must be 'node' or 'global'")
        if min(self.heads, self.ffn_hidden, self.blocks, self.d_f, self.d_y) <= 0:
            raise ValueError("attention/head sizes must be positive")

    @classmethod
    def profile(cls, name: str, **overrides) -> ModelConfig:
        if name not in PROFILES:
            raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        return replace(PROFILES[name], **overrides)

    @property
    def layout(self) -> SliceLayout:
        return SliceLayout(self.d_obs, self.d_s, self.d_t, self.d_p)

    def to_dict(self) -> dict:
        return asdict(self)


PROFILES = {
    "tiny": ModelConfig(),
    "full": ModelConfig(
        d_obs=24, d_s=12, d_t=60, d_p=72, h_obs=64, d_cross=24, d_self=168,
        heads=4, ffn_hidden=256, d_f=24, d_y=32,
    ),
}


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def positional_encoding(T: int, D: int) -> np.ndarray:
    """Sinusoidal table; column 2i is sin, 2i+1 is cos of t / 10000^(2i/D).

    For odd ``D`` the last (even-indexed) column follows the sine formula.
    """
    t = np.arange(T, dtype=np.float64)[:, None]
    j = np.arange(D)
    angle = t / np.power(10000.0, 2.0 * (j // 2) / D)
    return np.where(j % 2 == 0, np.sin(angle), np.cos(angle))


def replace_slice(H: Tensor, sl: slice, new: Tensor) -> Tensor:
    """Copy of ``H`` with features ``sl`` swapped for ``new``; the rest is copied bit-for-bit."""
    d = H.shape[-1]
    parts = []
    if sl.start > 0:
        parts.append(H[..., : sl.start])
    parts.append(new)
    if sl.stop < d:
        parts.append(H[..., sl.stop :])
    return concat(parts, axis=-1)


def multi_head_attention(q_in: Tensor, kv_in: Tensor, p: Mapping[str, Tensor], heads: int):
    """Scaled dot-product attention over the second-to-last axis.

    Returns the head-concatenated output projected by ``wo`` and the score
    tensor of shape (..., heads, S, S).
    """
    q = linear(q_in, p["wq"])
    k = linear(kv_in, p["wk"])
    v = linear(kv_in, p["wv"])
    *lead, S, D = q.shape
    dh = D // heads
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(x):
        return x.reshape(*lead, S, heads, dh).transpose(*perm)

    qh, kh, vh = split(q), split(k), split(v)
    scores = softmax(matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
    out = matmul(scores, vh).transpose(*perm).reshape(*lead, S, D)
    return linear(out, p["wo"]), scores.data


def residual_ffn(x: Tensor, attn: Tensor, p: Mapping[str, Tensor], eps: float) -> Tensor:
    """LN(FFN(LN(attn + x)) + LN(attn + x)) with FFN = relu(.W1+b1)W2+b2."""
    b = layer_norm(attn + x, p["ln1_g"], p["ln1_b"], eps)
    f = linear(relu(linear(b, p["ffn_w1"], p["ffn_b1"])), p["ffn_w2"], p["ffn_b2"])
    return layer_norm(f + b, p["ln2_g"], p["ln2_b"], eps)


def cross_attention_block(
    H: Tensor, layout: SliceLayout, q_key: str, kv_key: str, p: Mapping[str, Tensor],
    heads: int, eps: float = 1e-5,
):
    """Slice ``q_key`` queries slice ``kv_key``; only ``kv_key`` is rewritten."""
    q_sl, kv_sl = layout[q_key], layout[kv_key]
    if q_sl.stop > H.shape[-1] or kv_sl.stop > H.shape[-1]:
        raise ValueError("slice out of layout bounds")
    kv = H[..., kv_sl]
    attn, scores = multi_head_attention(H[..., q_sl], kv, p, heads)
    return replace_slice(H, kv_sl, residual_ffn(kv, attn, p, eps)), scores


def self_attention_block(H: Tensor, p: Mapping[str, Tensor], heads: int, eps: float = 1e-5):
    """Full-width self attention over the second-to-last axis, same residual/LN/FFN."""
    if H.shape[-1] != p["wq"].shape[0]:
        raise ValueError(f"width {H.shape[-1]} != attention input {p['wq'].shape[0]}")
    attn, scores = multi_head_attention(H, H, p, heads)
    return residual_ffn(H, attn, p, eps), scores


def attention_param_shapes(d_q: int, d_kv: int, d_attn: int, ffn: int) -> dict[str, tuple]:
    return {
        "wq": (d_q, d_attn), "wk": (d_kv, d_attn), "wv": (d_kv, d_attn), "wo": (d_attn, d_kv),
        "ln1_g": (d_kv,), "ln1_b": (d_kv,),
        "ffn_w1": (d_kv, ffn), "ffn_b1": (ffn,), "ffn_w2": (ffn, d_kv), "ffn_b2": (d_kv,),
        "ln2_g": (d_kv,), "ln2_b": (d_kv,),
    }


def scci(H: Tensor, layout: SliceLayout, params: Mapping[str, Mapping[str, Tensor]], heads: int, eps: float = 1e-5):
    """Spatial-context cross interaction on (B, T, N, d_h): s->o then o->s."""
    maps = {}
    for stage, a, b in CROSS_STAGES:
        H, maps[stage] = cross_attention_block(H, layout, a, b, params[stage], heads, eps)
    return H, maps


def tcci(
    Ht: Tensor, layout: SliceLayout, params: Mapping[str, Mapping[str, Tensor]], heads: int,
    eps: float = 1e-5, use_pe: bool = True, reverse: bool = True,
):
    """Temporal-context cross interaction on transposed (B, N, T, d_h)."""
    if use_pe:
        T = Ht.shape[-2]
        t_sl = layout["t"]
        pe = positional_encoding(T, layout.d_t)
        Ht = replace_slice(Ht, t_sl, Ht[..., t_sl] + pe)
    maps = {}
    for stage, a, b in TEMPORAL_CROSS_STAGES:
        if stage == "TCCI-ot" and not reverse:
            continue
        Ht, maps[stage] = cross_attention_block(Ht, layout, a, b, params[stage], heads, eps)
    return Ht, maps


def fuse_and_predict(H: Tensor, layout: SliceLayout, p: Mapping[str, Tensor], horizon: int, c_out: int) -> Tensor:
    """1x1 fusion of o/s/t slices, prompt mixing, time-flattened per-node head.

    (B, T, N, d_h) -> (B, horizon, N, c_out).
    """
    z = (
        linear(H[..., layout["o"]], p["fusion/w_o"])
        + linear(H[..., layout["s"]], p["fusion/w_s"])
        + linear(H[..., layout["t"]], p["fusion/w_t"])
    )
    u = linear(z, p["fusion/w_z"]) + linear(H[..., layout["p"]], p["fusion/w_p"])
    B, T, N, d_y = u.shape
    flat = u.transpose(0, 2, 1, 3).reshape(B, N, T * d_y)
    y = linear(flat, p["head/w"], p["head/b"])
    return y.reshape(B, N, horizon, c_out).transpose(0, 2, 1, 3)


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------


@dataclass
class AttentionMaps:
    """Score tensors keyed by stage (prefixed ``b{k}/`` for blocks after the first)."""

    scores: dict[str, np.ndarray] = field(default_factory=dict)

    def rows(self):
        for arr in self.scores.values():
            yield from arr.reshape(-1, arr.shape[-1])


class MSTIModel:
    """Shared interaction-network weights plus one prompt parameter per task."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.layout = config.layout
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}
        for name, shape in self.param_shapes().items():
            self.params[name] = Parameter(name, init_array(name, shape, rng))
        self.prompts: dict[str, Parameter] = {}

    # -- structure -------------------------------------------------------
    def param_shapes(self) -> dict[str, tuple]:
        c = self.config
        lay = self.layout
        shapes = embedding_param_shapes(c.c_in, c.h_obs, lay, c.slots_per_day)
        w = lay.widths
        for b in range(c.blocks):
            if c.use_cross:
                stages = list(CROSS_STAGES) + list(TEMPORAL_CROSS_STAGES)
                for stage, qk, kvk in stages:
                    if stage == "TCCI-ot" and not c.tcci_reverse:
                        continue
                    for k, s in attention_param_shapes(w[qk], w[kvk], c.d_cross, c.ffn_hidden).items():
                        shapes[f"block{b}/{stage}/{k}"] = s
            for stage in ("TSI", "SSI"):
                for k, s in attention_param_shapes(lay.d_h, lay.d_h, c.d_self, c.ffn_hidden).items():
                    shapes[f"block{b}/{stage}/{k}"] = s
        shapes.update({
            "fusion/w_o": (lay.d_obs, c.d_f),
            "fusion/w_s": (lay.d_s, c.d_f),
            "fusion/w_t": (lay.d_t, c.d_f),
            "fusion/w_z": (c.d_f, c.d_y),
            "fusion/w_p": (lay.d_p, c.d_y),
            "head/w": (c.input_len * c.d_y, c.horizon * c.c_out),
            "head/b": (c.horizon * c.c_out,),
        })
        return shapes

    @property
    def prompt_shape(self) -> tuple:
        c = self.config
        return (c.num_nodes, c.d_p) if c.prompt_mode == "node" else (c.d_p,)

    def set_prompt(self, task: str, value, trainable: bool = True) -> Parameter:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.prompt_shape:
            raise ValueError(f"prompt shape {value.shape} != {self.prompt_shape}")
        mask = None if trainable else np.ones(self.prompt_shape, dtype=bool)
        p = Parameter(f"prompt/{task}", value, mask)
        self.prompts[task] = p
        return p

    def all_params(self) -> list[Parameter]:
        return list(self.params.values()) + list(self.prompts.values())

    # -- forward ---------------------------------------------------------
    def stage_plan(self) -> list[tuple[str, tuple[str, ...]]]:
        """Ordered (stage, parameter-name prefixes it consumes)."""
        c = self.config
        plan: list[tuple[str, tuple[str, ...]]] = [("embed", ("embed/", "prompt/"))]
        for b in range(c.blocks):
            stages = ["TSI", "SSI"]
            if c.use_cross:
                cross = ["SCCI-so", "SCCI-os", "TCCI-to"] + (["TCCI-ot"] if c.tcci_reverse else [])
                stages = cross + stages
            plan += [(f"block{b}/{st}", (f"block{b}/{st}/",)) for st in stages]
        plan.append(("head", ("fusion/", "head/")))
        return plan

    def run_stage(self, stage: str, state, batch: Batch, coords: np.ndarray, task: str, maps: AttentionMaps):
        """Advance ``state`` = (H, temporal_major) through one stage.

        H is (B, T, N, d_h) when ``temporal_major`` is False and (B, N, T, d_h)
        after the transpose for the temporal stages. The head stage returns
        the prediction tensor instead of a state.
        """
        c = self.config
        p = {name: prm.tensor for name, prm in self.params.items()}
        if stage == "embed":
            e_obs = embed_observations(batch.x, p)
            e_s = embed_spatial(coords, p)
            e_t = embed_temporal(batch.tod, batch.dow, batch.ts, p)
            H = assemble_representation(e_obs, e_s, e_t, self.prompts[task].tensor, self.layout).H
            return H, False
        H, temporal_major = state
        if stage == "head":
            if temporal_major:
                H = H.swapaxes(1, 2)
            return fuse_and_predict(H, self.layout, p, c.horizon, c.c_out)
        block, name = stage.split("/")
        b = int(block[len("block"):])
        sp = {leaf: p[f"{stage}/{leaf}"] for leaf in _ATTN_LEAVES}
        tag = "" if b == 0 else f"b{b}/"
        want_temporal = name.startswith("TCCI") or name == "TSI"
        if want_temporal != temporal_major:
            H = H.swapaxes(1, 2)
        if name.startswith("SCCI") or name.startswith("TCCI"):
            q_key, kv_key = _CROSS_KEYS[name]
            if name == "TCCI-to" and c.positional_encoding:
                t_sl = self.layout["t"]
                H = replace_slice(H, t_sl, H[..., t_sl] + positional_encoding(H.shape[-2], self.layout.d_t))
            H, maps.scores[tag + name] = cross_attention_block(H, self.layout, q_key, kv_key, sp, c.heads, c.ln_eps)
        else:
            H, maps.scores[tag + name] = self_attention_block(H, sp, c.heads, c.ln_eps)
        return H, want_temporal

    def forward(self, batch: Batch, coords: np.ndarray, task: str):
        """Return (prediction (B, T', N, c_out), AttentionMaps)."""
        c = self.config
        if batch.x.shape[-1] != c.c_in:
            raise ValueError(f"batch has {batch.x.shape[-1]} channels, model expects {c.c_in}")
        if batch.x.shape[2] != c.num_nodes:
            raise ValueError(f"batch has {batch.x.shape[2]} nodes, model expects {c.num_nodes}")
        if task not in self.prompts:
            raise KeyError(f"no prompt loaded for task {task!r}")
        maps = AttentionMaps()
        state = None
        for stage, _ in self.stage_plan():
            state = self.run_stage(stage, state, batch, coords, task, maps)
        return state, maps

    # -- state -----------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.all_params()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for p in self.all_params():
            if p.name in state:
                p.value = state[p.name]

    def masks(self) -> dict[str, np.ndarray]:
        return {name: p.freeze_mask.copy() for name, p in self.params.items()}
