"""Dual attention: CBAM gating and single-head self-attention over positions.

CBAM refines a feature map along two separate dimensions, channel first and
spatial second, each gate squashed through a sigmoid and multiplied into the
map.  Self-attention flattens the spatial grid into HW tokens, projects them
to queries/keys/values, mixes values by row-normalised similarity, and maps
the result back onto the grid through a pointwise output projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import (Rng, ShapeError, Tensor, concat, init_tensor, matmul,
                     reshape, softmax_rows, tmax, transpose)


@dataclass
class CbamParams:
    """Shared two-layer gating MLP (no biases) plus the spatial mixing kernel."""
    mlp_w1: Tensor          # (C, hidden)
    mlp_w2: Tensor          # (hidden, C)
    reduction: int
    spatial_kernel: Tensor  # (1, 2, k, k), odd k


def init_cbam_params(channels: int, reduction: int = 16, kernel_size: int = 7,
                     rng: Rng | None = None, dtype=np.float32) -> CbamParams:
    if reduction < 1:
        raise ValueError(f"reduction must be >= 1, got {reduction}")
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError(f"spatial kernel must be odd, got {kernel_size}")
    hidden = max(1, channels // reduction)
    rng = rng if rng is not None else Rng(0)
    return CbamParams(
        mlp_w1=init_tensor((channels, hidden), "glorot_uniform", rng.child("mlp_w1"), dtype=dtype),
        mlp_w2=init_tensor((hidden, channels), "glorot_uniform", rng.child("mlp_w2"), dtype=dtype),
        reduction=reduction,
        spatial_kernel=init_tensor((1, 2, kernel_size, kernel_size), "he_normal",
                                   rng.child("spatial_kernel"), dtype=dtype),
    )


def _shared_mlp(v: Tensor, p: CbamParams) -> Tensor:
    return matmul(ops.relu(matmul(v, p.mlp_w1)), p.mlp_w2)


def channel_attention(f: Tensor, p: CbamParams) -> Tensor:
    """Per-channel gate in (0, 1): sigmoid(MLP(avgpool) + MLP(maxpool))."""
    if f.shape[1] != p.mlp_w1.shape[0]:
        raise ShapeError(f"channel_attention: feature channels {f.shape[1]} do not match "
                         f"MLP input width {p.mlp_w1.shape[0]}")
    avg_path = _shared_mlp(ops.global_avg_pool(f), p)
    max_path = _shared_mlp(ops.global_max_pool(f), p)
    return ops.sigmoid(avg_path + max_path)


def spatial_attention(f: Tensor, p: CbamParams) -> Tensor:
    """Per-position gate in (0, 1) from pooled channel statistics.

    Channel mean and channel max are stacked into a 2-channel map and mixed by
    one same-padded convolution, so output spatial size equals the input's.
    """
    if p.spatial_kernel.shape[:2] != (1, 2):
        raise ShapeError(f"spatial kernel must have shape (1, 2, k, k), got {p.spatial_kernel.shape}")
    mean_map = f.mean(axis=1, keepdims=True)
    max_map = tmax(f, axis=1, keepdims=True)
    stacked = concat([mean_map, max_map], axis=1)
    return ops.sigmoid(ops.conv2d(stacked, p.spatial_kernel, stride=1, padding="same"))


def cbam(f: Tensor, p: CbamParams) -> Tensor:
    """Sequential channel-then-spatial refinement by multiplicative gates."""
    b, c = f.shape[0], f.shape[1]
    cw = reshape(channel_attention(f, p), (b, c, 1, 1))
    refined = f * cw
    return refined * spatial_attention(refined, p)


@dataclass
class SelfAttentionParams:
    """Projections for single-head attention over flattened feature maps."""
    w_q: Tensor    # (F_in, d_k)
    w_k: Tensor    # (F_in, d_k)
    w_v: Tensor    # (F_in, d_v)
    w_out: Tensor  # (d_v, F_out)


def init_self_attention_params(f_in: int, d_k: int, d_v: int, f_out: int,
                               rng: Rng | None = None, dtype=np.float32) -> SelfAttentionParams:
    if min(d_k, d_v, f_out) < 1:
        raise ValueError(f"attention dims must be >= 1, got d_k={d_k} d_v={d_v} f_out={f_out}")
    rng = rng if rng is not None else Rng(0)
    glorot = lambda shape, label: init_tensor(shape, "glorot_uniform", rng.child(label), dtype=dtype)
    return SelfAttentionParams(
        w_q=glorot((f_in, d_k), "w_q"),
        w_k=glorot((f_in, d_k), "w_k"),
        w_v=glorot((f_in, d_v), "w_v"),
        w_out=glorot((d_v, f_out), "w_out"),
    )


def self_attention(f: Tensor, p: SelfAttentionParams) -> Tensor:
    """Single-head attention over the HW positions of each batch element.

    Flattens (B, C, H, W) to per-image token matrices X of shape (HW, C),
    forms Q = X w_q, K = X w_k, V = X w_v, weights the values by
    softmax(Q K^T / sqrt(d_k)) row by row, projects through w_out, and
    reshapes back to (B, F_out, H, W).  Batch elements never attend to each
    other.
    """
    b, c, h, w = f.shape
    f_in, d_k = p.w_q.shape
    if c != f_in:
        raise ShapeError(f"self_attention: input channels {c} do not match projections ({f_in})")
    if p.w_k.shape != (f_in, d_k):
        raise ShapeError(f"self_attention: w_q {p.w_q.shape} and w_k {p.w_k.shape} disagree")
    d_v = p.w_v.shape[1]
    if p.w_out.shape[0] != d_v:
        raise ShapeError(f"self_attention: w_v {p.w_v.shape} and w_out {p.w_out.shape} disagree")
    f_out = p.w_out.shape[1]
    n = h * w

    x = reshape(transpose(f, (0, 2, 3, 1)), (b, n, c))
    q = matmul(x, p.w_q)
    k = matmul(x, p.w_k)
    v = matmul(x, p.w_v)
    logits = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(d_k))
    attn = reshape(softmax_rows(reshape(logits, (b * n, n))), (b, n, n))
    mixed = matmul(attn, v)
    projected = matmul(mixed, p.w_out)
    return transpose(reshape(projected, (b, h, w, f_out)), (0, 3, 1, 2))


def attention_matrix(f: Tensor, p: SelfAttentionParams) -> np.ndarray:
    """The (B, HW, HW) row-stochastic attention weights, for inspection."""
    b, c, h, w = f.shape
    n = h * w
    x = reshape(transpose(f, (0, 2, 3, 1)), (b, n, c))
    q = matmul(x, p.w_q)
    k = matmul(x, p.w_k)
    logits = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(p.w_q.shape[1]))
    return softmax_rows(reshape(logits, (b * n, n))).data.reshape(b, n, n)
