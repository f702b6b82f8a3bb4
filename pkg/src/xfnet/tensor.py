"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus the bookkeeping needed to replay the
chain rule backwards through whatever graph of operations produced it.  Ops
never mutate their inputs; each one returns a fresh ``Tensor`` carrying a
closure that knows how to push gradients into its parents.  Training runs in
float32; gradient checking builds float64 graphs for tight tolerances.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible. Message names both shapes."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional array of reals plus an autodiff record.

    ``data`` is a flat-strided row-major numpy array; ``grad`` is filled in by
    :func:`backward`.  Leaf tensors created with ``requires_grad=True`` are the
    trainable parameters; everything derived from them records its parents so
    the reverse pass can reach them.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        self.data = _as_array(data, dtype)
        if any(d < 1 for d in self.data.shape):
            raise ShapeError(f"tensor dimensions must all be >= 1, got {self.data.shape}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A view of the same data with the graph cut."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(data: np.ndarray, parents: Iterable[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    """Build a graph node for a custom operation.

    ``backward`` receives the gradient flowing into this node and must
    accumulate into each parent's ``.grad`` (already zero-initialised by the
    reverse pass).  Recording is skipped entirely when no parent needs
    gradients, so inference-mode graphs stay flat.
    """
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise and structural primitives ----------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return from_op(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.shape)

    return from_op(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return from_op(out_data, (a, b), backward)


def texp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad += g * out_data

    return from_op(out_data, (a,), backward)


def tlog(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        if a.requires_grad:
            a.grad += g / a.data

    return from_op(np.log(a.data), (a,), backward)


def tsqrt(a) -> Tensor:
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad += g * (0.5 / out_data)

    return from_op(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product, 2-D or batched 3-D on the leading axis.

    Differentiable with respect to both operands.
    """
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return from_op(out_data, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)

    def backward(g):
        if a.requires_grad:
            a.grad += g.reshape(a.shape)

    return from_op(a.data.reshape(shape), (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.grad += g.transpose(inverse)

    return from_op(a.data.transpose(axes), (a,), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.grad += np.broadcast_to(g, a.shape)
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                g = np.expand_dims(g, ax)
            a.grad += np.broadcast_to(g, a.shape)

    return from_op(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in ax]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a, axis: int, keepdims=False) -> Tensor:
    """Maximum along one axis; the gradient routes to the first argmax."""
    a = _wrap(a)
    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out_data = out_data.squeeze(axis)

    def backward(g):
        if not a.requires_grad:
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        scatter = np.zeros_like(a.data)
        np.put_along_axis(scatter, np.expand_dims(idx, axis), g, axis=axis)
        a.grad += scatter

    return from_op(out_data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t.grad += piece

    return from_op(out_data, tuple(tensors), backward)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a matrix, stabilised by max subtraction.

    Each output row sums to 1 and lies in (0, 1).  Non-finite input is
    rejected rather than silently propagated.
    """
    x = _wrap(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    if not np.isfinite(x.data).all():
        raise ValueError("softmax_rows: input contains NaN or infinite entries")
    shift = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - shift)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            # d softmax: s * (g - sum(g * s))
            dot = (g * out_data).sum(axis=1, keepdims=True)
            x.grad += out_data * (g - dot)

    return from_op(out_data, (x,), backward)


def log_softmax_rows(x) -> Tensor:
    """Row-wise log-softmax via the log-sum-exp trick."""
    x = _wrap(x)
    if x.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects a matrix, got shape {x.shape}")
    if not np.isfinite(x.data).all():
        raise ValueError("log_softmax_rows: input contains NaN or infinite entries")
    shift = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - shift)
    denom = e.sum(axis=1, keepdims=True)
    out_data = (x.data - shift) - np.log(denom)

    def backward(g):
        if x.requires_grad:
            soft = e / denom
            x.grad += g - soft * g.sum(axis=1, keepdims=True)

    return from_op(out_data, (x,), backward)


# -- reverse pass ------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None
             ) -> dict[str, Tensor] | None:
    """Reverse-mode gradient of a scalar loss.

    Fills ``.grad`` on every tensor reachable from ``loss`` (gradients from
    multiple uses of a node accumulate by summation).  When ``params`` is
    given, returns ``{name: gradient}`` with zero tensors for parameters the
    loss never touched.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    if params is None:
        return None
    reached = {id(n) for n in order}
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = p.grad if id(p) in reached else np.zeros_like(p.data)
        out[name] = Tensor(g)
    return out


def reached_leaves(loss: Tensor) -> set[int]:
    """ids of every tensor structurally connected to ``loss``.

    Used to distinguish a parameter that is wired into the graph but happens
    to get a zero gradient (dead ReLU region) from one that was never touched.
    """
    return {id(n) for n in _topo_order(loss)}


# -- random source -----------------------------------------------------------

def _label_to_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    digest = hashlib.blake2s(str(label).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Deterministic, splittable random source.

    Streams are PCG64 generators keyed by a numpy ``SeedSequence`` tree: the
    root is the 64-bit seed, and ``child(*labels)`` extends the spawn key with
    hashes of the labels.  Identical seed and call sequence give bit-identical
    output on every platform, and child streams are independent of the order
    in which siblings are created.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_key)))

    def child(self, *labels) -> "Rng":
        key = self._key + tuple(_label_to_key(l) for l in labels)
        return Rng(self.seed, key)

    def normal(self, shape, std=1.0, mean=0.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * std + mean).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)


# -- parameter initialisation --------------------------------------------------

_SCHEMES = ("he_normal", "glorot_uniform", "zeros", "ones")


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    # conv kernels are (out_ch, in_ch, kh, kw); receptive field scales both fans
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


def init_tensor(shape, scheme: str, rng: Rng | None = None,
                dtype=np.float32, requires_grad: bool = True,
                name: str | None = None) -> Tensor:
    """Create a parameter tensor under a named initialisation scheme.

    he_normal draws N(0, sqrt(2/fan_in)); glorot_uniform draws
    U(-b, b) with b = sqrt(6/(fan_in+fan_out)); zeros/ones need no rng.
    Deterministic given the rng state.
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ShapeError("init_tensor: empty shape")
    if scheme not in _SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}, expected one of {_SCHEMES}")
    if scheme == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif scheme == "ones":
        data = np.ones(shape, dtype=dtype)
    else:
        if rng is None:
            raise ValueError(f"scheme {scheme!r} needs an rng")
        fan_in, fan_out = _fans(shape)
        if scheme == "he_normal":
            data = rng.normal(shape, std=float(np.sqrt(2.0 / fan_in)), dtype=dtype)
        else:
            bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
            data = rng.uniform(shape, low=-bound, high=bound, dtype=dtype)
    return Tensor(data, requires_grad=requires_grad, name=name)


# -- finite differences --------------------------------------------------------

def finite_diff_check(f, inputs: Sequence, eps: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences.

    ``f`` takes the wrapped inputs and returns a scalar Tensor; it must be
    deterministic.  Every coordinate of every input is perturbed by +-eps and
    the symmetric difference quotient is compared against the analytic
    gradient using ``|a - n| / max(|a|, |n|, 1e-8)``.  Run this in float64:
    float32 difference quotients are too noisy for tight tolerances.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    ts = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    for t in ts:
        t.requires_grad = True
    loss = f(*ts)
    named = {str(i): t for i, t in enumerate(ts)}
    grads = backward(loss, named)
    worst = 0.0
    for i, t in enumerate(ts):
        analytic = grads[str(i)].data
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = f(*ts).item()
            flat[j] = orig - eps
            fm = f(*ts).item()
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic.reshape(-1)[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
