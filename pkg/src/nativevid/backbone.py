"""
Pre-norm vision transformer over packed native-resolution patch sequences.

Each layer computes

    x_hat = x + Attention(RMSNorm(x))
    x_out = x_hat + SwiGLU(RMSNorm(x_hat))

with 2D rotary positions on queries and keys. Most layers attend inside
``window x window`` tiles of the patch grid (per sample, per temporal
slice); the layers listed in ``full_attention_layers`` attend over the
whole sample. Attention never crosses a sample boundary.

Projection matrices are stored ``(out, in)`` and applied as ``x @ W.T``;
the patch embedding ``E`` is stored ``(patch_dim, dim)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, ContractError
from .packing import PackedBatch
from .patchify import PatchSpec
from .tensor import Tensor, add, make_op, matmul, reshape, silu, softmax_np, transpose


def default_full_layers(num_layers: int) -> tuple[int, ...]:
    """Last layer of each eighth-of-depth chunk: {7, 15, 23, 31} at depth 32."""
    if num_layers == 0:
        return ()
    k = max(1, num_layers // 8)
    return tuple((i + 1) * num_layers // k - 1 for i in range(k))


@dataclass
class ModelConfig:
    num_layers: int = 4
    dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    window: int = 8
    full_attention_layers: tuple | None = None
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    init_std: float = 0.02
    patch: tuple = (2, 14, 14)
    channels: int = 3

    def __post_init__(self):
        self.patch = tuple(self.patch)
        if self.full_attention_layers is None:
            self.full_attention_layers = default_full_layers(self.num_layers)
        self.full_attention_layers = tuple(int(i) for i in self.full_attention_layers)
        if self.num_layers < 0 or self.dim < 1 or self.num_heads < 1 or self.ffn_dim < 1:
            raise ConfigError(f"invalid model sizes in {self}")
        if self.dim % self.num_heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.num_heads} heads")
        if self.head_dim % 4:
            raise ConfigError(f"head dim {self.head_dim} must be divisible by 4 for 2D RoPE")
        if any(not 0 <= i < self.num_layers for i in self.full_attention_layers):
            raise ConfigError(f"full-attention ids {self.full_attention_layers} outside "
                              f"[0, {self.num_layers})")
        if self.window < 1:
            raise ConfigError("window side must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def patch_spec(self) -> PatchSpec:
        return PatchSpec(*self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch_spec.patch_dim(self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["full_attention_layers"] = list(self.full_attention_layers)
        d["patch"] = list(self.patch)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


LAYER_MATRICES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


def init_backbone(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Normal(0, init_std) projections, unit norm gains."""
    rng = np.random.default_rng(seed)
    D, F = cfg.dim, cfg.ffn_dim

    def normal(*shape):
        return (rng.standard_normal(shape) * cfg.init_std).astype(dtype)

    w = {"patch_embed": normal(cfg.patch_dim, D)}
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        w[p + "attn_norm"] = np.ones(D, dtype=dtype)
        for name in ("wq", "wk", "wv", "wo"):
            w[p + name] = normal(D, D)
        w[p + "ffn_norm"] = np.ones(D, dtype=dtype)
        w[p + "w_gate"] = normal(F, D)
        w[p + "w_up"] = normal(F, D)
        w[p + "w_down"] = normal(D, F)
    return w


# -- primitives ---------------------------------------------------------------
def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``x * gain / sqrt(mean(x**2) + eps)`` over the last axis."""
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def bw(g):
        dxhat = g * gd
        dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        dgain = np.sum((g * xhat).reshape(-1, xd.shape[-1]), axis=0)
        return dx, dgain

    return make_op(xhat * gd, (x, gain), bw, "rmsnorm")


def linear(x: Tensor, w: Tensor) -> Tensor:
    return matmul(x, transpose(w))


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    return linear(silu(linear(x, w_gate)) * linear(x, w_up), w_down)


def rope_tables(coords_hw: np.ndarray, head_dim: int, base: float = 10000.0, dtype=np.float64):
    """Per-token ``cos``/``sin`` of shape ``(N, head_dim // 2)``, one column per pair.

    The first ``head_dim // 4`` channel pairs rotate with the row index h,
    the remaining pairs with the column index w; pair i of an axis turns
    by ``p * base ** (-4 i / head_dim)``.
    """
    if head_dim % 4:
        raise ConfigError(f"head dim {head_dim} must be divisible by 4 for 2D RoPE")
    quarter = head_dim // 4
    inv_freq = base ** (-2.0 * np.arange(quarter) / (head_dim / 2))
    c = np.asarray(coords_hw, dtype=np.float64)
    ang = np.concatenate([c[:, :1] * inv_freq, c[:, 1:2] * inv_freq], axis=1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (N, H, hd); cos/sin broadcast over heads
    c, s = cos[:, None, :], sin[:, None, :]
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * c - xo * s
    out[..., 1::2] = xe * s + xo * c
    return out


def rope2d_apply(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent channel pairs of ``(N, heads, head_dim)`` vectors."""
    return make_op(_rotate(x.data, cos, sin), (x,), lambda g: (_rotate(g, cos, -sin),), "rope2d")


# -- grouping -------------------------------------------------------------
def window_partition(coords: np.ndarray, window: int, boundaries) -> np.ndarray:
    """Group id per token: one group per (sample, t, window tile).

    Tiles start at grid position (0, 0); edge tiles may be smaller.
    """
    b = np.asarray(boundaries, dtype=np.int64)
    sample = np.repeat(np.arange(len(b) - 1), np.diff(b))
    c = np.asarray(coords)
    keys = np.stack([sample, c[:, 0], c[:, 1] // window, c[:, 2] // window], axis=1)
    _, ids = np.unique(keys, axis=0, return_inverse=True)
    return ids.reshape(-1).astype(np.int64)


@dataclass
class AttentionGroups:
    """Token indices bucketed by group size so equal-sized groups run batched."""

    group_ids: np.ndarray
    buckets: list = field(default_factory=list)     # list of (G, s) index arrays

    @classmethod
    def from_ids(cls, group_ids: np.ndarray) -> "AttentionGroups":
        gid = np.asarray(group_ids, dtype=np.int64)
        order = np.argsort(gid, kind="stable")
        _, starts, counts = np.unique(gid[order], return_index=True, return_counts=True)
        buckets = []
        for size in np.unique(counts):
            sel = starts[counts == size]
            buckets.append(order[sel[:, None] + np.arange(size)[None, :]])
        return cls(gid, buckets)


def check_nesting(group_ids: np.ndarray, boundaries) -> None:
    b = np.asarray(boundaries, dtype=np.int64)
    sample = np.repeat(np.arange(len(b) - 1), np.diff(b))
    if len(sample) != len(group_ids):
        raise ContractError("group ids and boundaries cover different token counts")
    # a group's tokens must all carry one sample id
    lo = np.full(group_ids.max() + 1, np.iinfo(np.int64).max)
    hi = np.full(group_ids.max() + 1, -1)
    np.minimum.at(lo, group_ids, sample)
    np.maximum.at(hi, group_ids, sample)
    used = hi >= 0
    if np.any(lo[used] != hi[used]):
        raise ContractError("an attention group crosses a sample boundary")


def grouped_attention(q: Tensor, k: Tensor, v: Tensor, groups: AttentionGroups) -> Tensor:
    """Softmax attention restricted to each group; inputs ``(N, heads, head_dim)``."""
    qd, kd, vd = q.data, k.data, v.data
    scale = 1.0 / math.sqrt(qd.shape[-1])
    out = np.empty_like(vd)
    probs = []
    for idx in groups.buckets:
        Q = qd[idx].transpose(0, 2, 1, 3)
        K = kd[idx].transpose(0, 2, 1, 3)
        V = vd[idx].transpose(0, 2, 1, 3)
        P = softmax_np((Q @ K.swapaxes(-1, -2)) * scale, axis=-1)
        out[idx] = (P @ V).transpose(0, 2, 1, 3)
        probs.append(P)

    def bw(g):
        gq, gk, gv = np.empty_like(qd), np.empty_like(kd), np.empty_like(vd)
        for idx, P in zip(groups.buckets, probs):
            dO = g[idx].transpose(0, 2, 1, 3)
            Q = qd[idx].transpose(0, 2, 1, 3)
            K = kd[idx].transpose(0, 2, 1, 3)
            V = vd[idx].transpose(0, 2, 1, 3)
            dP = dO @ V.swapaxes(-1, -2)
            dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) * scale
            gq[idx] = (dS @ K).transpose(0, 2, 1, 3)
            gk[idx] = (dS.swapaxes(-1, -2) @ Q).transpose(0, 2, 1, 3)
            gv[idx] = (P.swapaxes(-1, -2) @ dO).transpose(0, 2, 1, 3)
        return gq, gk, gv

    return make_op(out, (q, k, v), bw, "grouped_attention")


def masked_dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, group_ids) -> np.ndarray:
    """Reference: full N x N scores with cross-group entries masked out."""
    gid = np.asarray(group_ids)
    scale = 1.0 / math.sqrt(q.shape[-1])
    allowed = gid[:, None] == gid[None, :]
    s = np.einsum("nhd,mhd->hnm", q, k) * scale
    s = np.where(allowed[None], s, -np.inf)
    p = softmax_np(s, axis=-1)
    return np.einsum("hnm,mhd->nhd", p, v)


# -- layers -----------------------------------------------------------------
@dataclass
class BatchGeometry:
    """Everything about a packed batch the layers need besides the tokens."""

    boundaries: np.ndarray
    cos: np.ndarray
    sin: np.ndarray
    window_groups: AttentionGroups
    full_groups: AttentionGroups

    @classmethod
    def build(cls, coords: np.ndarray, boundaries, cfg: ModelConfig, dtype=np.float32) -> "BatchGeometry":
        b = np.asarray(boundaries, dtype=np.int64)
        cos, sin = rope_tables(np.asarray(coords)[:, 1:3], cfg.head_dim, cfg.rope_base, dtype)
        wid = window_partition(coords, cfg.window, b)
        sid = np.repeat(np.arange(len(b) - 1), np.diff(b))
        return cls(b, cos, sin, AttentionGroups.from_ids(wid), AttentionGroups.from_ids(sid))


def attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, num_heads: int,
              cos: np.ndarray, sin: np.ndarray, groups: AttentionGroups) -> Tensor:
    n, d = x.shape
    hd = d // num_heads

    def heads(t):
        return reshape(t, (n, num_heads, hd))

    q = rope2d_apply(heads(linear(x, wq)), cos, sin)
    k = rope2d_apply(heads(linear(x, wk)), cos, sin)
    o = grouped_attention(q, k, heads(linear(x, wv)), groups)
    return linear(reshape(o, (n, d)), wo)


def transformer_layer(x: Tensor, w: Mapping[str, Tensor], prefix: str, cfg: ModelConfig,
                      geom: BatchGeometry, full: bool) -> Tensor:
    groups = geom.full_groups if full else geom.window_groups
    h = rmsnorm(x, w[prefix + "attn_norm"], cfg.norm_eps)
    x = add(x, attention(h, w[prefix + "wq"], w[prefix + "wk"], w[prefix + "wv"], w[prefix + "wo"],
                         cfg.num_heads, geom.cos, geom.sin, groups))
    h = rmsnorm(x, w[prefix + "ffn_norm"], cfg.norm_eps)
    return add(x, swiglu_ffn(h, w[prefix + "w_gate"], w[prefix + "w_up"], w[prefix + "w_down"]))


def encode(x0: Tensor, geom: BatchGeometry, cfg: ModelConfig, weights: Mapping[str, Tensor]) -> Tensor:
    """Run every layer on already-embedded tokens."""
    x = x0
    full = set(cfg.full_attention_layers)
    for i in range(cfg.num_layers):
        x = transformer_layer(x, weights, f"layers.{i}.", cfg, geom, i in full)
    return x


def forward(packed: PackedBatch, cfg: ModelConfig, weights: Mapping[str, Tensor],
            geom: BatchGeometry | None = None) -> Tensor:
    """Embed raw patches with ``patch_embed`` and apply the layer stack."""
    E = weights["patch_embed"]
    if packed.tokens.shape[1] != E.shape[0]:
        raise ContractError(f"packed tokens have width {packed.tokens.shape[1]}, "
                            f"embedding expects {E.shape[0]}")
    if geom is None:
        geom = BatchGeometry.build(packed.coords, packed.boundaries, cfg, E.dtype)
    x0 = matmul(Tensor(packed.tokens.astype(E.dtype, copy=False)), E)
    return encode(x0, geom, cfg, weights)
