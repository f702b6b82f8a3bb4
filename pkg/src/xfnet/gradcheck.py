"""Finite-difference verification of every differentiable operation.

Each case builds a tiny float64 problem (no dimension above 6), reduces the
op's output to a scalar through a fixed random projection, and compares the
analytic gradient of every input coordinate against central differences.
Float64 matters: float32 difference quotients drown the comparison in noise.
"""

from __future__ import annotations

import numpy as np

from . import attention, ops
from .tensor import (Rng, Tensor, concat, finite_diff_check, log_softmax_rows,
                     matmul, softmax_rows, texp, tlog, tmax, tsqrt, tsum)
from .train import cross_entropy_loss

TOLERANCE = 1e-3


def _proj(rng: Rng, shape) -> np.ndarray:
    return rng.normal(shape, dtype=np.float64)


def _dot(out: Tensor, proj: np.ndarray) -> Tensor:
    return (out * proj).sum()


def run_gradient_suite(seed: int = 0) -> list[tuple[str, float]]:
    """(operation name, worst relative gradient error) for every op."""
    root = Rng(seed)

    def draw(label, shape, offset=0.0):
        return root.child(label).normal(shape, dtype=np.float64) + offset

    cases: list[tuple[str, float]] = []

    def check(name, f, *inputs):
        cases.append((name, finite_diff_check(f, inputs)))

    r = root.child("proj")

    p = _proj(r.child("add"), (3, 4))
    check("add (broadcast)", lambda a, b: _dot(a + b, p),
          draw("add.a", (3, 4)), draw("add.b", (4,)))

    p = _proj(r.child("mul"), (3, 4))
    check("mul (broadcast)", lambda a, b: _dot(a * b, p),
          draw("mul.a", (3, 4)), draw("mul.b", (1, 4)))

    p = _proj(r.child("div"), (2, 5))
    b_off = draw("div.b", (2, 5))
    b_off += np.where(b_off >= 0, 1.0, -1.0)  # keep denominators away from zero
    check("div", lambda a, b: _dot(a / b, p), draw("div.a", (2, 5)), b_off)

    p = _proj(r.child("exp"), (2, 3))
    check("exp", lambda a: _dot(texp(a), p), draw("exp.a", (2, 3)))

    p = _proj(r.child("log"), (2, 3))
    check("log", lambda a: _dot(tlog(a), p), np.abs(draw("log.a", (2, 3))) + 0.5)

    p = _proj(r.child("sqrt"), (2, 3))
    check("sqrt", lambda a: _dot(tsqrt(a), p), np.abs(draw("sqrt.a", (2, 3))) + 0.5)

    p = _proj(r.child("matmul"), (3, 5))
    check("matmul", lambda a, b: _dot(matmul(a, b), p),
          draw("mm.a", (3, 4)), draw("mm.b", (4, 5)))

    p = _proj(r.child("bmm"), (2, 3, 5))
    check("matmul (batched)", lambda a, b: _dot(matmul(a, b), p),
          draw("bmm.a", (2, 3, 4)), draw("bmm.b", (2, 4, 5)))

    p = _proj(r.child("reshape"), (6, 2))
    check("reshape+transpose",
          lambda a: _dot(a.reshape((3, 4)).transpose((1, 0)).reshape((6, 2)), p),
          draw("rt.a", (2, 6)))

    p = _proj(r.child("sum"), (3,))
    check("sum (axis)", lambda a: _dot(tsum(a, axis=1), p), draw("sum.a", (3, 4)))

    p = _proj(r.child("mean"), (4,))
    check("mean (axis)", lambda a: _dot(a.mean(axis=0), p), draw("mean.a", (3, 4)))

    p = _proj(r.child("max"), (3,))
    check("max (axis)", lambda a: _dot(tmax(a, axis=1), p), draw("max.a", (3, 4)))

    p = _proj(r.child("concat"), (3, 5))
    check("concat", lambda a, b: _dot(concat([a, b], axis=1), p),
          draw("cat.a", (3, 2)), draw("cat.b", (3, 3)))

    p = _proj(r.child("softmax"), (3, 5))
    check("softmax_rows", lambda a: _dot(softmax_rows(a), p), draw("sm.a", (3, 5)))

    p = _proj(r.child("logsoftmax"), (3, 5))
    check("log_softmax_rows", lambda a: _dot(log_softmax_rows(a), p),
          draw("lsm.a", (3, 5)))

    p = _proj(r.child("relu"), (3, 4))
    a_off = draw("relu.a", (3, 4))
    a_off += np.where(a_off >= 0, 0.2, -0.2)  # stay off the kink
    check("relu", lambda a: _dot(ops.relu(a), p), a_off)

    p = _proj(r.child("sigmoid"), (3, 4))
    check("sigmoid", lambda a: _dot(ops.sigmoid(a), p), draw("sig.a", (3, 4)))

    p = _proj(r.child("fc"), (3, 2))
    check("fully_connected", lambda x, w, b: _dot(ops.fully_connected(x, w, b), p),
          draw("fc.x", (3, 4)), draw("fc.w", (4, 2)), draw("fc.b", (2,)))

    p = _proj(r.child("conv"), (2, 4, 5, 5))
    check("conv2d (same, stride 1)",
          lambda x, k, b: _dot(ops.conv2d(x, k, b, stride=1, padding="same"), p),
          draw("conv.x", (2, 3, 5, 5)), draw("conv.k", (4, 3, 3, 3)),
          draw("conv.b", (4,)))

    p = _proj(r.child("conv2"), (2, 4, 3, 3))
    check("conv2d (same, stride 2)",
          lambda x, k: _dot(ops.conv2d(x, k, stride=2, padding="same"), p),
          draw("conv2.x", (2, 3, 6, 6)), draw("conv2.k", (4, 3, 3, 3)))

    p = _proj(r.child("conv3"), (2, 4, 3, 3))
    check("conv2d (valid)",
          lambda x, k: _dot(ops.conv2d(x, k, stride=1, padding="valid"), p),
          draw("conv3.x", (2, 3, 5, 5)), draw("conv3.k", (4, 3, 3, 3)))

    p = _proj(r.child("dw"), (2, 3, 5, 5))
    check("depthwise_conv2d",
          lambda x, k: _dot(ops.depthwise_conv2d(x, k), p),
          draw("dw.x", (2, 3, 5, 5)), draw("dw.k", (3, 1, 3, 3)))

    p = _proj(r.child("sep"), (2, 4, 5, 5))
    check("separable_conv2d",
          lambda x, dk, pk: _dot(ops.separable_conv2d(x, dk, pk), p),
          draw("sep.x", (2, 3, 5, 5)), draw("sep.dk", (3, 1, 3, 3)),
          draw("sep.pk", (4, 3, 1, 1)))

    p = _proj(r.child("pool"), (2, 2, 3, 3))
    check("max_pool2d",
          lambda x: _dot(ops.max_pool2d(x, window=3, stride=2), p),
          draw("pool.x", (2, 2, 5, 5)))

    p = _proj(r.child("gap"), (2, 3))
    check("global_avg_pool", lambda x: _dot(ops.global_avg_pool(x), p),
          draw("gap.x", (2, 3, 4, 4)))

    p = _proj(r.child("gmp"), (2, 3))
    check("global_max_pool", lambda x: _dot(ops.global_max_pool(x), p),
          draw("gmp.x", (2, 3, 4, 4)))

    p = _proj(r.child("bn"), (4, 3, 2, 2))

    def bn_train(x, scale, shift):
        state = ops.BatchNormState(scale=scale, shift=shift,
                                   running_mean=np.zeros(3), running_var=np.ones(3))
        out, _ = ops.batch_norm(x, state, "train")
        return _dot(out, p)

    check("batch_norm (train)", bn_train,
          draw("bn.x", (4, 3, 2, 2)), np.abs(draw("bn.s", (3,))) + 0.5,
          draw("bn.b", (3,)))

    ca_p = _proj(r.child("ca"), (2, 4, 3, 3))
    sa_p = _proj(r.child("sa"), (2, 4, 3, 3))
    cb_p = _proj(r.child("cb"), (2, 4, 3, 3))

    def cbam_params(w1, w2, sk):
        return attention.CbamParams(mlp_w1=w1, mlp_w2=w2, reduction=2,
                                    spatial_kernel=sk)

    cb_args = (draw("cb.x", (2, 4, 3, 3)), draw("cb.w1", (4, 2)) * 0.5,
               draw("cb.w2", (2, 4)) * 0.5, draw("cb.sk", (1, 2, 3, 3)) * 0.5)

    check("channel_attention",
          lambda x, w1, w2, sk: _dot(x * attention.channel_attention(
              x, cbam_params(w1, w2, sk)).reshape((2, 4, 1, 1)), ca_p),
          *cb_args)
    check("spatial_attention",
          lambda x, w1, w2, sk: _dot(x * attention.spatial_attention(
              x, cbam_params(w1, w2, sk)), sa_p),
          *cb_args)
    check("cbam",
          lambda x, w1, w2, sk: _dot(attention.cbam(x, cbam_params(w1, w2, sk)), cb_p),
          *cb_args)

    at_p = _proj(r.child("attn"), (2, 3, 2, 2))

    def attn(x, wq, wk, wv, wo):
        params = attention.SelfAttentionParams(w_q=wq, w_k=wk, w_v=wv, w_out=wo)
        return _dot(attention.self_attention(x, params), at_p)

    check("self_attention", attn,
          draw("at.x", (2, 4, 2, 2)), draw("at.wq", (4, 2)), draw("at.wk", (4, 2)),
          draw("at.wv", (4, 2)), draw("at.wo", (2, 3)))

    labels = np.array([0, 2, 1, 1])
    check("cross_entropy", lambda z: cross_entropy_loss(z, labels),
          draw("ce.z", (4, 3)))

    return cases


def worst_error(results: list[tuple[str, float]]) -> float:
    return max(err for _, err in results)
