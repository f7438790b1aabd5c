"""Attention primitives: multi-head self-attention and deformable sampling.

Self-attention follows the classic per-head form: each head projects the
input rows with its own query/key/value matrices, applies scaled dot-product
attention softmax(QK^T / sqrt(d_k)) V, and the concatenated head outputs go
through a final output projection.  Both sublayer types are wrapped in
residual connections with layer normalization, layernorm(Y + dropout(sub)).

Deformable attention reads a feature map at a handful of learned sampling
locations around a per-query reference point instead of attending to every
pixel.  For query row q with features z_q and normalized reference point
P_q, each head h samples S offsets produced by a linear map of z_q, weights
the (bilinear) samples by a softmax over that head's sampling weights, runs
them through the head's value projection W'_h and mixes heads with output
projections W_h:

    out_q = sum_h W_h [ sum_s A_hs * W'_h F_bi(pix(P_q) + dP_hs) ]

Sampling locations are in pixel units: pix(P) = (P.x * (W_f - 1),
P.y * (H_f - 1)) for an (C, H_f, W_f) map, with zero padding outside the
map.  The multi-scale variant samples S points per pyramid level and
normalizes A over all levels * S samples of a head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tt
from .tensor import Tensor

__all__ = [
    "ReferencePoint",
    "MultiHeadAttnParams",
    "DeformAttnParams",
    "multi_head_self_attention",
    "residual_layernorm",
    "deform_attn",
    "multiscale_deform_attn",
    "deform_attention_weights",
    "ring_offset_bias",
]


@dataclass(frozen=True)
class ReferencePoint:
    """Normalized (x, y) location in [0, 1]^2; constructor clamps."""

    x: float
    y: float

    def __post_init__(self):
        object.__setattr__(self, "x", min(1.0, max(0.0, float(self.x))))
        object.__setattr__(self, "y", min(1.0, max(0.0, float(self.y))))

    def to_pixels(self, width: int, height: int) -> tuple[float, float]:
        return self.x * (width - 1), self.y * (height - 1)


@dataclass(frozen=True)
class MultiHeadAttnParams:
    """Per-head projections plus the shared output projection.

    wq/wk/wv are H tensors of shape (d, d_k); wo is (H * d_k, d).
    """

    wq: tuple[Tensor, ...]
    wk: tuple[Tensor, ...]
    wv: tuple[Tensor, ...]
    wo: Tensor

    def __post_init__(self):
        h = len(self.wq)
        if h < 1 or len(self.wk) != h or len(self.wv) != h:
            raise ValueError("wq/wk/wv must hold the same positive head count")
        d, dk = self.wq[0].shape
        for t in (*self.wq, *self.wk, *self.wv):
            if t.shape != (d, dk):
                raise ValueError("all head projections must share one shape")
        if self.wo.shape != (h * dk, d):
            raise ValueError(
                f"wo must be ({h * dk}, {d}), got {self.wo.shape}"
            )

    @property
    def num_heads(self) -> int:
        return len(self.wq)

    @property
    def head_dim(self) -> int:
        return self.wq[0].shape[1]


def multi_head_self_attention(y: Tensor, params: MultiHeadAttnParams) -> Tensor:
    """Scaled dot-product self-attention over the rows of ``y`` (N, d)."""
    if y.ndim != 2 or y.shape[1] != params.wq[0].shape[0]:
        raise ValueError(f"input shape {y.shape} does not match projections")
    inv_sqrt_dk = 1.0 / math.sqrt(params.head_dim)
    heads = []
    for wq, wk, wv in zip(params.wq, params.wk, params.wv):
        q = tt.matmul(y, wq)
        k = tt.matmul(y, wk)
        v = tt.matmul(y, wv)
        logits = tt.scale(tt.matmul(q, tt.transpose(k)), inv_sqrt_dk)
        heads.append(tt.matmul(tt.softmax_rows(logits), v))
    return tt.matmul(tt.concat_cols(heads), params.wo)


def residual_layernorm(
    y: Tensor,
    sublayer_out: Tensor,
    gamma: Tensor,
    beta: Tensor,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """layernorm(y + dropout(sublayer_out)); rate 0 skips the dropout."""
    if y.shape != sublayer_out.shape:
        raise ValueError("residual branches must have equal shapes")
    return tt.layer_norm(y + tt.dropout(sublayer_out, dropout_rate, rng), gamma, beta)


@dataclass(frozen=True)
class DeformAttnParams:
    """Parameters of one deformable attention sublayer.

    With query width D, feature channels C, H heads, S points and L levels:
    w_offset (D, 2*H*S*L) and b_offset predict per-sample pixel offsets,
    w_weight (D, H*S*L) and b_weight the (pre-softmax) sampling weights,
    w_value holds H value projections (C, D // H) and w_out H output
    projections (D // H, D).  Columns of the offset head are laid out
    head-major, then level, then sample, with x before y; the weight head
    is head-major, then level, then sample.
    """

    w_offset: Tensor
    b_offset: Tensor
    w_weight: Tensor
    b_weight: Tensor
    w_value: tuple[Tensor, ...]
    w_out: tuple[Tensor, ...]
    num_points: int
    num_levels: int = 1

    def __post_init__(self):
        h = len(self.w_value)
        s, lv = self.num_points, self.num_levels
        if h < 1 or len(self.w_out) != h or s < 1 or lv < 1:
            raise ValueError("bad head/point/level counts")
        d = self.w_offset.shape[0]
        if d % h != 0:
            raise ValueError(f"head count {h} must divide query width {d}")
        dh = d // h
        if self.w_offset.shape != (d, 2 * h * s * lv):
            raise ValueError(f"w_offset must be ({d}, {2 * h * s * lv})")
        if self.b_offset.shape != (2 * h * s * lv,):
            raise ValueError("b_offset shape mismatch")
        if self.w_weight.shape != (d, h * s * lv):
            raise ValueError(f"w_weight must be ({d}, {h * s * lv})")
        if self.b_weight.shape != (h * s * lv,):
            raise ValueError("b_weight shape mismatch")
        c = self.w_value[0].shape[0]
        for t in self.w_value:
            if t.shape != (c, dh):
                raise ValueError("w_value tensors must share shape (C, D/H)")
        for t in self.w_out:
            if t.shape != (dh, d):
                raise ValueError("w_out tensors must share shape (D/H, D)")

    @property
    def num_heads(self) -> int:
        return len(self.w_value)

    @property
    def query_width(self) -> int:
        return self.w_offset.shape[0]

    @property
    def feature_channels(self) -> int:
        return self.w_value[0].shape[0]


def ring_offset_bias(num_heads: int, num_points: int, num_levels: int = 1) -> np.ndarray:
    """Offset-head bias placing the S initial samples on a unit-pixel ring.

    Angles are evenly spaced over the points; every head and level starts
    from the same ring.  Layout matches DeformAttnParams.b_offset.
    """
    bias = np.zeros(2 * num_heads * num_points * num_levels)
    for h in range(num_heads):
        for lv in range(num_levels):
            for s in range(num_points):
                theta = 2.0 * math.pi * s / num_points
                base = 2 * (h * num_levels * num_points + lv * num_points + s)
                bias[base] = math.cos(theta)
                bias[base + 1] = math.sin(theta)
    return bias


def _reference_pixels(
    refs: Sequence[ReferencePoint], fmap: Tensor, num_points: int
) -> np.ndarray:
    """Pixel coordinates of each query's reference, tiled S times: (N*S, 2)."""
    _, h, w = fmap.shape
    px = np.array([r.to_pixels(w, h) for r in refs])
    return np.repeat(px, num_points, axis=0)


def _deform_core(
    z: Tensor,
    refs: Sequence[ReferencePoint],
    maps: Sequence[Tensor],
    params: DeformAttnParams,
    ref_tensors: Sequence[Tensor] | None = None,
) -> Tensor:
    if z.ndim != 2 or z.shape[1] != params.query_width:
        raise ValueError(f"query shape {z.shape} does not match parameters")
    n = z.shape[0]
    h, s, lv = params.num_heads, params.num_points, params.num_levels
    if len(maps) != lv:
        raise ValueError(f"expected {lv} feature maps, got {len(maps)}")
    if len(refs) != n:
        raise ValueError("one reference point per query row is required")
    for fmap in maps:
        if fmap.ndim != 3 or fmap.shape[0] != params.feature_channels:
            raise ValueError("feature maps must be (C, H, W) with matching C")

    offsets = tt.matmul(z, params.w_offset) + params.b_offset  # (N, 2HSL)
    logits = tt.matmul(z, params.w_weight) + params.b_weight  # (N, HSL)

    out = None
    for head in range(h):
        # One softmax per head over its S*L samples.
        attn = tt.softmax_rows(tt.slice_cols(logits, head * s * lv, (head + 1) * s * lv))
        for level in range(lv):
            fmap = maps[level]
            base = 2 * (head * lv * s + level * s)
            block = tt.slice_cols(offsets, base, base + 2 * s)  # (N, 2S)
            delta = tt.reshape(block, (n * s, 2))
            if ref_tensors is not None:
                points = delta + ref_tensors[level]
            else:
                points = tt.add(
                    delta, Tensor(_reference_pixels(refs, fmap, s))
                )
            sampled = tt.bilinear_sample_rows(fmap, points)  # (N*S, C)
            valued = tt.matmul(sampled, params.w_value[head])  # (N*S, D/H)
            a = tt.reshape(
                tt.slice_cols(attn, level * s, (level + 1) * s), (n * s, 1)
            )
            pooled = tt.sum_row_groups(tt.mul(valued, a), s)  # (N, D/H)
            contrib = tt.matmul(pooled, params.w_out[head])  # (N, D)
            out = contrib if out is None else out + contrib
    return out


def deform_attn(
    z: Tensor,
    refs: Sequence[ReferencePoint],
    fmap: Tensor,
    params: DeformAttnParams,
    ref_tensors: Sequence[Tensor] | None = None,
) -> Tensor:
    """Single-level deformable attention: (N, D) queries -> (N, D).

    ``ref_tensors`` optionally supplies the tiled reference pixel
    coordinates as leaf tensors so their gradients can be inspected; by
    default the reference points enter as constants (stop-gradient).
    """
    if params.num_levels != 1:
        raise ValueError("deform_attn expects single-level parameters")
    return _deform_core(z, refs, [fmap], params, ref_tensors)


def multiscale_deform_attn(
    z: Tensor,
    refs: Sequence[ReferencePoint],
    pyramid: Sequence[Tensor],
    params: DeformAttnParams,
    ref_tensors: Sequence[Tensor] | None = None,
) -> Tensor:
    """Multi-level deformable attention; A normalizes over levels * points."""
    if params.num_levels != len(pyramid):
        raise ValueError(
            f"parameters built for {params.num_levels} levels, got {len(pyramid)}"
        )
    return _deform_core(z, refs, list(pyramid), params, ref_tensors)


def deform_attention_weights(z: Tensor, params: DeformAttnParams) -> np.ndarray:
    """Normalized sampling weights, shape (N, H, S*L); diagnostics helper."""
    n = z.shape[0]
    h, s, lv = params.num_heads, params.num_points, params.num_levels
    logits = (tt.matmul(z, params.w_weight) + params.b_weight).data
    out = np.zeros((n, h, s * lv))
    for head in range(h):
        block = logits[:, head * s * lv : (head + 1) * s * lv]
        shifted = block - block.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out[:, head, :] = e / e.sum(axis=1, keepdims=True)
    return out
