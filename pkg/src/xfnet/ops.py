"""Differentiable neural-network primitives over :mod:`xfnet.tensor`.

Convolutions are cross-correlations (no kernel flip) computed through strided
window views; "same" padding is symmetric (k-1)//2 per side, which for odd
kernels yields ceil(input/stride) output size at any stride.  Max pooling pads
with -inf; batch normalization is functional and hands back a new state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, from_op, _wrap


def _resolve_padding(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"same padding needs odd kernel sides, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    if padding == "valid":
        return 0, 0
    if isinstance(padding, int) and padding >= 0:
        return padding, padding
    raise ValueError(f"padding must be 'same', 'valid' or a non-negative int, got {padding!r}")


def conv_out_size(size: int, k: int, pad: int, stride: int) -> int:
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(f"convolution output collapses: input {size}, kernel {k}, "
                         f"pad {pad}, stride {stride}")
    return out


def _pad_spatial(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _window_view(xp: np.ndarray, kh: int, kw: int, stride: int,
                 ho: int, wo: int) -> np.ndarray:
    """Read-only (B, C, kh, kw, Ho, Wo) view over the padded input."""
    b, c, hp, wp = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, (b, c, kh, kw, ho, wo),
                      (s0, s1, s2, s3, s2 * stride, s3 * stride))


def _col2im(dview: np.ndarray, shape: tuple[int, ...], kh: int, kw: int,
            stride: int, ph: int, pw: int) -> np.ndarray:
    """Scatter-add window gradients (B, C, kh, kw, Ho, Wo) back to the input."""
    b, c, h, w = shape
    ho, wo = dview.shape[4], dview.shape[5]
    dxp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=dview.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dview[:, :, i, j]
    if ph or pw:
        return dxp[:, :, ph:ph + h, pw:pw + w]
    return dxp


def conv2d(x, kernel, bias=None, stride: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation. ``kernel`` is (out_ch, in_ch, kh, kw)."""
    x, kernel = _wrap(x), _wrap(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    b, c, h, w = x.shape
    out_ch, in_ch, kh, kw = kernel.shape
    if in_ch != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    ph, pw = _resolve_padding(padding, kh, kw)
    ho, wo = conv_out_size(h, kh, ph, stride), conv_out_size(w, kw, pw, stride)
    xp = _pad_spatial(x.data, ph, pw)
    view = _window_view(xp, kh, kw, stride, ho, wo)
    # out[b,o,y,x] = sum_{c,i,j} kernel[o,c,i,j] * view[b,c,i,j,y,x]
    out_data = np.tensordot(kernel.data, view, axes=([1, 2, 3], [1, 2, 3]))
    out_data = out_data.transpose(1, 0, 2, 3)
    if bias is not None:
        bias = _wrap(bias)
        out_data = out_data + bias.data.reshape(1, out_ch, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        if kernel.requires_grad:
            kernel.grad += np.tensordot(g, view, axes=([0, 2, 3], [0, 4, 5]))
        if x.requires_grad:
            dview = np.tensordot(kernel.data, g, axes=([0], [1]))  # (C,kh,kw,B,Ho,Wo)
            dview = dview.transpose(3, 0, 1, 2, 4, 5)
            x.grad += _col2im(dview, x.shape, kh, kw, stride, ph, pw)
        if bias is not None and bias.requires_grad:
            bias.grad += g.sum(axis=(0, 2, 3))

    return from_op(out_data, parents, backward)


def depthwise_conv2d(x, kernel, stride: int = 1, padding="same") -> Tensor:
    """Per-channel convolution. ``kernel`` is (C, 1, kh, kw)."""
    x, kernel = _wrap(x), _wrap(kernel)
    b, c, h, w = x.shape
    kc, one, kh, kw = kernel.shape
    if kc != c or one != 1:
        raise ShapeError(f"depthwise kernel mismatch: input {x.shape} vs kernel {kernel.shape}")
    ph, pw = _resolve_padding(padding, kh, kw)
    ho, wo = conv_out_size(h, kh, ph, stride), conv_out_size(w, kw, pw, stride)
    xp = _pad_spatial(x.data, ph, pw)
    view = _window_view(xp, kh, kw, stride, ho, wo)
    k2 = kernel.data[:, 0]  # (C, kh, kw)
    out_data = np.einsum("cij,bcijyx->bcyx", k2, view, optimize=True)

    def backward(g):
        if kernel.requires_grad:
            dk = np.einsum("bcyx,bcijyx->cij", g, view, optimize=True)
            kernel.grad += dk[:, None]
        if x.requires_grad:
            dview = k2[None, :, :, :, None, None] * g[:, :, None, None]
            x.grad += _col2im(dview, x.shape, kh, kw, stride, ph, pw)

    return from_op(out_data, (x, kernel), backward)


def separable_conv2d(x, depthwise_kernel, pointwise_kernel,
                     stride: int = 1, padding="same") -> Tensor:
    """Depthwise filtering followed by a 1x1 pointwise mix, in that order."""
    pointwise_kernel = _wrap(pointwise_kernel)
    if pointwise_kernel.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise kernel must be 1x1 spatial, got {pointwise_kernel.shape}")
    h = depthwise_conv2d(x, depthwise_kernel, stride=stride, padding=padding)
    return conv2d(h, pointwise_kernel, stride=1, padding="valid")


def max_pool2d(x, window: int = 3, stride: int = 2, padding="same") -> Tensor:
    """Windowed maximum; padded cells are -inf so they never win."""
    x = _wrap(x)
    b, c, h, w = x.shape
    ph, pw = _resolve_padding(padding, window, window)
    ho, wo = conv_out_size(h, window, ph, stride), conv_out_size(w, window, pw, stride)
    xp = _pad_spatial(x.data, ph, pw, value=-np.inf)
    view = _window_view(xp, window, window, stride, ho, wo)
    flat = view.reshape(b, c, window * window, ho, wo)
    idx = np.argmax(flat, axis=2)
    out_data = np.take_along_axis(flat, idx[:, :, None], axis=2).squeeze(2)

    def backward(g):
        if not x.requires_grad:
            return
        dflat = np.zeros((b, c, window * window, ho, wo), dtype=g.dtype)
        np.put_along_axis(dflat, idx[:, :, None], g[:, :, None], axis=2)
        dview = dflat.reshape(b, c, window, window, ho, wo)
        x.grad += _col2im(dview, x.shape, window, window, stride, ph, pw)

    return from_op(out_data, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """Spatial mean per channel, (B, C, H, W) -> (B, C)."""
    x = _wrap(x)
    return x.mean(axis=(2, 3))


def global_max_pool(x) -> Tensor:
    """Spatial maximum per channel, (B, C, H, W) -> (B, C)."""
    from .tensor import tmax
    x = _wrap(x)
    b, c, h, w = x.shape
    return tmax(x.reshape((b, c, h * w)), axis=2)


def relu(x) -> Tensor:
    x = _wrap(x)
    out_data = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad:
            x.grad += g * (x.data > 0)  # gradient at exactly 0 is defined as 0

    return from_op(out_data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)

    def backward(g):
        if x.requires_grad:
            x.grad += g * out_data * (1.0 - out_data)

    return from_op(out_data, (x,), backward)


def fully_connected(x, weight, bias) -> Tensor:
    """x @ weight + bias, bias broadcast over the batch."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"fully_connected feature mismatch: {x.shape} vs {weight.shape}")
    from .tensor import matmul, add
    return add(matmul(x, weight), bias)


@dataclass
class BatchNormState:
    """Learnable affine plus running statistics for one channel axis.

    ``scale``/``shift`` are trainable tensors; the running moments are plain
    arrays updated as ``(1 - momentum) * old + momentum * batch``.  The batch
    statistics that produced the last train-mode output ride along so callers
    can reproduce that output in eval mode.
    """
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.01
    eps: float = 1e-3
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None


def init_batch_norm(channels: int, momentum: float = 0.01, eps: float = 1e-3,
                    dtype=np.float32) -> BatchNormState:
    return BatchNormState(
        scale=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        shift=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        momentum=momentum,
        eps=eps,
    )


def batch_norm(x, state: BatchNormState, mode: str) -> tuple[Tensor, BatchNormState]:
    """Per-channel normalization over (B, H, W).

    Train mode standardises by batch moments and returns a state with running
    statistics advanced by ``momentum``; eval mode applies the stored running
    statistics.  Returns ``(output, new_state)``; the input state is untouched.
    """
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects (B, C, H, W), got {x.shape}")
    c = x.shape[1]
    if state.scale.shape[0] != c:
        raise ShapeError(f"batch_norm channel mismatch: input {x.shape} vs state {state.scale.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    scale_r = state.scale.reshape((1, c, 1, 1))
    shift_r = state.shift.reshape((1, c, 1, 1))
    if mode == "eval":
        rm = state.running_mean.reshape(1, c, 1, 1)
        rv = state.running_var.reshape(1, c, 1, 1)
        inv = 1.0 / np.sqrt(rv + state.eps)
        y = (x - Tensor(rm)) * Tensor(inv.astype(x.dtype))
        return y * scale_r + shift_r, state

    b, _, h, w = x.shape
    if b * h * w == 1:
        raise ValueError("batch_norm train mode needs more than one value per channel")
    from .tensor import tsqrt
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    y = centered / tsqrt(var + state.eps)
    out = y * scale_r + shift_r

    m = state.momentum
    bm = mu.data.reshape(c).copy()
    bv = var.data.reshape(c).copy()
    new_state = replace(
        state,
        running_mean=((1.0 - m) * state.running_mean + m * bm).astype(state.running_mean.dtype),
        running_var=((1.0 - m) * state.running_var + m * bv).astype(state.running_var.dtype),
        batch_mean=bm,
        batch_var=bv,
    )
    return out, new_state
