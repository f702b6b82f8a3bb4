"""Config-driven assembly of the attention-augmented Xception variants.

The network keeps the classic three-stage layout: an entry flow that
downsamples to the backbone width, a middle flow that is either the original
single chain of eight residual separable blocks or the fused variant (parallel
branches of different depth, optionally CBAM-refined, concatenated and mixed
by a 1x1 convolution), and an exit flow where a self-attention branch runs in
parallel with a separable convolution and the two are added before pooling and
classification.

Every trainable tensor lives in a registry keyed by dotted names such as
``middle.branch2.block1.sep1.depthwise``; batch-norm running statistics are
separate named buffers.  A model built without an rng allocates no parameter
data and supports shape tracing only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import attention
from . import ops
from .config import ModelConfig
from .tensor import Rng, ShapeError, Tensor, concat, init_tensor, reached_leaves


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


class Module:
    """Minimal composable layer: children and parameters found by attribute scan."""

    def forward(self, x, ctx):
        raise NotImplementedError

    def named_children(self):
        for attr, val in vars(self).items():
            if isinstance(val, Module):
                yield attr, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{attr}{i + 1}", item

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(_join(prefix, name))

    def local_params(self):
        for attr, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield attr, val

    def named_params(self, prefix: str = ""):
        for mod_name, mod in self.named_modules(prefix):
            for attr, p in mod.local_params():
                yield _join(mod_name, attr), p

    def local_buffers(self):
        return ()

    def named_buffers(self, prefix: str = ""):
        for mod_name, mod in self.named_modules(prefix):
            for attr, b in mod.local_buffers():
                yield _join(mod_name, attr), b


@dataclass
class ForwardCtx:
    mode: str
    trace: list | None = None

    @property
    def train(self) -> bool:
        return self.mode == "train"

    def record(self, name: str, value: Tensor):
        if self.trace is not None:
            self.trace.append((name, tuple(value.shape[1:])))


# -- leaf layers --------------------------------------------------------------


class Conv(Module):
    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding="same", rng=None):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.kernel = None
        if rng is not None:
            self.kernel = init_tensor((out_ch, in_ch, kernel_size, kernel_size),
                                      "he_normal", rng.child("kernel"))

    def forward(self, x, ctx):
        return ops.conv2d(x, self.kernel, stride=self.stride, padding=self.padding)

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"expected {self.in_ch} channels, got {c}")
        ph, pw = ops._resolve_padding(self.padding, self.kernel_size, self.kernel_size)
        return (self.out_ch,
                ops.conv_out_size(h, self.kernel_size, ph, self.stride),
                ops.conv_out_size(w, self.kernel_size, pw, self.stride))


class SepConv(Module):
    """Depthwise 3x3 then pointwise 1x1, stride 1, same padding, no bias."""

    def __init__(self, in_ch, out_ch, rng=None, kernel_size=3):
        self.in_ch, self.out_ch, self.kernel_size = in_ch, out_ch, kernel_size
        self.depthwise = None
        self.pointwise = None
        if rng is not None:
            self.depthwise = init_tensor((in_ch, 1, kernel_size, kernel_size),
                                         "he_normal", rng.child("depthwise"))
            self.pointwise = init_tensor((out_ch, in_ch, 1, 1),
                                         "he_normal", rng.child("pointwise"))

    def forward(self, x, ctx):
        return ops.separable_conv2d(x, self.depthwise, self.pointwise)

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"expected {self.in_ch} channels, got {c}")
        return (self.out_ch, h, w)


class BatchNorm(Module):
    def __init__(self, channels, rng=None):
        # rng is only an allocation token here (the affine init is constant);
        # structure-only builds pass None like every other layer
        self.channels = channels
        self.state = ops.init_batch_norm(channels) if rng is not None else None
        self.scale = self.state.scale if self.state else None
        self.shift = self.state.shift if self.state else None

    def forward(self, x, ctx):
        out, new_state = ops.batch_norm(x, self.state, "train" if ctx.train else "eval")
        if ctx.train:
            self.state = new_state  # single-writer: the training thread owns the model
        return out

    def out_shape(self, shape):
        return shape

    def local_buffers(self):
        if self.state is None:
            return ()
        return (("running_mean", self.state.running_mean),
                ("running_var", self.state.running_var))

    def set_buffer(self, name: str, value: np.ndarray):
        if value.shape != (self.channels,):
            raise ShapeError(f"buffer {name} expects shape ({self.channels},), got {value.shape}")
        self.state = replace(self.state, **{name: value.astype(self.state.running_mean.dtype)})


class Dense(Module):
    def __init__(self, in_features, out_features, rng=None):
        self.in_features, self.out_features = in_features, out_features
        self.weight = None
        self.bias = None
        if rng is not None:
            self.weight = init_tensor((in_features, out_features), "glorot_uniform",
                                      rng.child("weight"))
            self.bias = init_tensor((out_features,), "zeros")

    def forward(self, x, ctx):
        return ops.fully_connected(x, self.weight, self.bias)

    def out_shape(self, shape):
        return (self.out_features,)


class Cbam(Module):
    def __init__(self, channels, reduction, kernel_size, rng=None):
        self.channels, self.reduction, self.kernel_size = channels, reduction, kernel_size
        self.mlp_w1 = self.mlp_w2 = self.spatial_kernel = None
        if rng is not None:
            p = attention.init_cbam_params(channels, reduction, kernel_size, rng)
            self.mlp_w1, self.mlp_w2 = p.mlp_w1, p.mlp_w2
            self.spatial_kernel = p.spatial_kernel

    def params_view(self) -> attention.CbamParams:
        return attention.CbamParams(self.mlp_w1, self.mlp_w2, self.reduction, self.spatial_kernel)

    def forward(self, x, ctx):
        return attention.cbam(x, self.params_view())

    def out_shape(self, shape):
        return shape


class SelfAttention(Module):
    def __init__(self, f_in, d_k, d_v, f_out, rng=None):
        self.f_in, self.d_k, self.d_v, self.f_out = f_in, d_k, d_v, f_out
        self.w_q = self.w_k = self.w_v = self.w_out = None
        if rng is not None:
            p = attention.init_self_attention_params(f_in, d_k, d_v, f_out, rng)
            self.w_q, self.w_k, self.w_v, self.w_out = p.w_q, p.w_k, p.w_v, p.w_out

    def params_view(self) -> attention.SelfAttentionParams:
        return attention.SelfAttentionParams(self.w_q, self.w_k, self.w_v, self.w_out)

    def forward(self, x, ctx):
        return attention.self_attention(x, self.params_view())

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.f_in:
            raise ShapeError(f"expected {self.f_in} channels, got {c}")
        return (self.f_out, h, w)


# -- blocks --------------------------------------------------------------------


class ResidualSepBlock(Module):
    """Two separable convolutions, stride-2 max pool, projected shortcut."""

    def __init__(self, in_ch, mid_ch, out_ch, leading_relu, rng=None):
        self.leading_relu = leading_relu
        child = (lambda n: rng.child(n)) if rng is not None else (lambda n: None)
        self.sep1 = SepConv(in_ch, mid_ch, child("sep1"))
        self.bn1 = BatchNorm(mid_ch, child("bn1"))
        self.sep2 = SepConv(mid_ch, out_ch, child("sep2"))
        self.bn2 = BatchNorm(out_ch, child("bn2"))
        self.shortcut = Conv(in_ch, out_ch, 1, stride=2, padding="same", rng=child("shortcut"))
        self.shortcut_bn = BatchNorm(out_ch, child("shortcut_bn"))

    def forward(self, x, ctx):
        h = ops.relu(x) if self.leading_relu else x
        h = ops.relu(self.bn1.forward(self.sep1.forward(h, ctx), ctx))
        h = self.bn2.forward(self.sep2.forward(h, ctx), ctx)
        h = ops.max_pool2d(h, window=3, stride=2, padding="same")
        shortcut = self.shortcut_bn.forward(self.shortcut.forward(x, ctx), ctx)
        return h + shortcut

    def out_shape(self, shape):
        main = self.sep2.out_shape(self.sep1.out_shape(shape))
        c, h, w = main
        pooled = (c, -(-h // 2), -(-w // 2))  # 3x3/2 same pool: ceil(size/2)
        if self.shortcut.out_shape(shape) != pooled:
            raise ShapeError(f"shortcut shape {self.shortcut.out_shape(shape)} "
                             f"does not match main path {pooled}")
        return pooled


class MiddleBlock(Module):
    """Three pre-activated separable convolutions around an identity shortcut,
    optionally followed by a CBAM refinement of the summed output."""

    def __init__(self, channels, cbam_cfg=None, rng=None):
        child = (lambda n: rng.child(n)) if rng is not None else (lambda n: None)
        self.sep1 = SepConv(channels, channels, child("sep1"))
        self.bn1 = BatchNorm(channels, child("bn1"))
        self.sep2 = SepConv(channels, channels, child("sep2"))
        self.bn2 = BatchNorm(channels, child("bn2"))
        self.sep3 = SepConv(channels, channels, child("sep3"))
        self.bn3 = BatchNorm(channels, child("bn3"))
        self.cbam = None
        if cbam_cfg is not None:
            reduction, kernel_size = cbam_cfg
            self.cbam = Cbam(channels, reduction, kernel_size, child("cbam"))

    def forward(self, x, ctx):
        h = x
        for sep, bn in ((self.sep1, self.bn1), (self.sep2, self.bn2), (self.sep3, self.bn3)):
            h = bn.forward(sep.forward(ops.relu(h), ctx), ctx)
        out = x + h
        if self.cbam is not None:
            out = self.cbam.forward(out, ctx)
        return out

    def out_shape(self, shape):
        self.sep1.out_shape(shape)
        return shape


# -- flows -----------------------------------------------------------------------


class EntryFlow(Module):
    def __init__(self, cfg: ModelConfig, rng=None):
        s = cfg.scale_width
        child = (lambda n: rng.child(n)) if rng is not None else (lambda n: None)
        self.conv1 = Conv(3, s(32), 3, stride=2, rng=child("conv1"))
        self.bn1 = BatchNorm(s(32), child("bn1"))
        self.conv2 = Conv(s(32), s(64), 3, stride=1, rng=child("conv2"))
        self.bn2 = BatchNorm(s(64), child("bn2"))
        widths = [s(64), s(128), s(256), s(728)]
        self.block = [
            ResidualSepBlock(widths[i], widths[i + 1], widths[i + 1],
                             leading_relu=(i > 0), rng=child(f"block{i + 1}"))
            for i in range(3)
        ]

    def forward(self, x, ctx):
        h = ops.relu(self.bn1.forward(self.conv1.forward(x, ctx), ctx))
        ctx.record("entry.conv1", h)
        h = ops.relu(self.bn2.forward(self.conv2.forward(h, ctx), ctx))
        ctx.record("entry.conv2", h)
        for i, block in enumerate(self.block):
            h = block.forward(h, ctx)
            ctx.record(f"entry.block{i + 1}", h)
        ctx.record("entry.out", h)
        return h

    def trace_shapes(self, shape, rows):
        shape = _traced(rows, "entry.conv1", self.conv1, shape)
        shape = _traced(rows, "entry.conv2", self.conv2, shape)
        for i, block in enumerate(self.block):
            shape = _traced(rows, f"entry.block{i + 1}", block, shape)
        rows.append(("entry.out", shape))
        return shape


class BranchChain(Module):
    def __init__(self, channels, length, cbam_cfg, rng=None):
        child = (lambda n: rng.child(n)) if rng is not None else (lambda n: None)
        self.block = [MiddleBlock(channels, cbam_cfg, child(f"block{j + 1}"))
                      for j in range(length)]

    def forward(self, x, ctx, name=""):
        h = x
        for j, block in enumerate(self.block):
            h = block.forward(h, ctx)
            ctx.record(f"{name}.block{j + 1}", h)
        return h


class MiddleFlowFused(Module):
    """Parallel branches over the same input, concatenated and fused at 1x1."""

    def __init__(self, cfg: ModelConfig, rng=None):
        s = cfg.scale_width
        ch = s(728)
        child = (lambda n: rng.child(n)) if rng is not None else (lambda n: None)
        cbam_cfg = (cfg.cbam_reduction, cfg.cbam_kernel) if cfg.cbam_enabled else None
        self.branch = [BranchChain(ch, n, cbam_cfg, child(f"branch{i + 1}"))
                       for i, n in enumerate(cfg.middle_branches)]
        self.fuse = Conv(ch * len(cfg.middle_branches), ch, 1, stride=1,
                         rng=child("fuse"))
        self.fuse_bn = BatchNorm(ch, child("fuse_bn"))

    def forward(self, x, ctx):
        outs = [branch.forward(x, ctx, name=f"middle.branch{i + 1}")
                for i, branch in enumerate(self.branch)]
        h = concat(outs, axis=1) if len(outs) > 1 else outs[0]
        h = self.fuse_bn.forward(self.fuse.forward(h, ctx), ctx)
        ctx.record("middle.fuse", h)
        return h

    def trace_shapes(self, shape, rows):
        for i, branch in enumerate(self.branch):
            sub = shape
            for j, block in enumerate(branch.block):
                sub = _traced(rows, f"middle.branch{i + 1}.block{j + 1}", block, sub)
        concat_shape = (shape[0] * len(self.branch), shape[1], shape[2])
        shape = _traced(rows, "middle.fuse", self.fuse, concat_shape)
        return shape


class MiddleFlowOriginal(Module):
    def __init__(self, cfg: ModelConfig, rng=None):
        ch = cfg.scale_width(728)
        child = (lambda n: rng.child(n)) if rng is not None else (lambda n: None)
        self.block = [MiddleBlock(ch, None, child(f"block{j + 1}")) for j in range(8)]

    def forward(self, x, ctx):
        h = x
        for j, block in enumerate(self.block):
            h = block.forward(h, ctx)
            ctx.record(f"middle.block{j + 1}", h)
        return h

    def trace_shapes(self, shape, rows):
        for j, block in enumerate(self.block):
            shape = _traced(rows, f"middle.block{j + 1}", block, shape)
        return shape


class ExitFlow(Module):
    def __init__(self, cfg: ModelConfig, rng=None):
        s = cfg.scale_width
        child = (lambda n: rng.child(n)) if rng is not None else (lambda n: None)
        in_ch = s(728)
        self.block = ResidualSepBlock(in_ch, in_ch, s(1024), leading_relu=True,
                                      rng=child("block"))
        self.sep1 = SepConv(s(1024), s(1536), child("sep1"))
        self.bn1 = BatchNorm(s(1536), child("bn1"))
        f_in = s(1536)
        f_out = cfg.attention_f_out if cfg.attention_f_out is not None else s(2048)
        self.attn = None
        if cfg.self_attention_enabled:
            d_k = cfg.attention_d_k if cfg.attention_d_k is not None else max(1, f_in // 8)
            d_v = cfg.attention_d_v if cfg.attention_d_v is not None else max(1, f_in // 8)
            self.attn = SelfAttention(f_in, d_k, d_v, f_out, child("attn"))
        self.sep2 = SepConv(f_in, f_out, child("sep2"))
        self.bn2 = BatchNorm(f_out, child("bn2"))
        self.fc = Dense(f_out, cfg.num_classes, child("fc"))

    def forward(self, x, ctx):
        h = self.block.forward(x, ctx)
        ctx.record("exit.block", h)
        h = ops.relu(self.bn1.forward(self.sep1.forward(h, ctx), ctx))
        ctx.record("exit.sep1", h)
        local = ops.relu(self.bn2.forward(self.sep2.forward(h, ctx), ctx))
        ctx.record("exit.sep2", local)
        if self.attn is not None:
            global_info = self.attn.forward(h, ctx)
            ctx.record("exit.attn", global_info)
            merged = global_info + local
            ctx.record("exit.merge", merged)
        else:
            merged = local
        pooled = ops.global_avg_pool(merged)
        ctx.record("exit.gap", pooled)
        logits = self.fc.forward(pooled, ctx)
        ctx.record("fc", logits)
        return logits

    def trace_shapes(self, shape, rows):
        shape = _traced(rows, "exit.block", self.block, shape)
        shape = _traced(rows, "exit.sep1", self.sep1, shape)
        local = _traced(rows, "exit.sep2", self.sep2, shape)
        if self.attn is not None:
            attn_shape = _traced(rows, "exit.attn", self.attn, shape)
            if attn_shape != local:
                raise ShapeError(f"exit.merge: attention {attn_shape} vs local {local}")
            rows.append(("exit.merge", attn_shape))
        pooled = (local[0],)
        rows.append(("exit.gap", pooled))
        out = _traced(rows, "fc", self.fc, pooled)
        return out


def _traced(rows, name, layer, shape):
    try:
        out = layer.out_shape(shape)
    except ShapeError as e:
        raise ShapeError(f"{name}: {e}") from None
    rows.append((name, out))
    return out


# -- the model --------------------------------------------------------------------


@dataclass
class ShapeTrace:
    """Ordered (layer name, output shape) rows; shapes exclude the batch axis."""
    rows: list

    def shapes(self) -> dict:
        return dict(self.rows)

    def __str__(self):
        width = max(len(name) for name, _ in self.rows)
        return "\n".join(f"{name:<{width}}  {'x'.join(str(d) for d in shape)}"
                         for name, shape in self.rows)


class Model(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng | None = None):
        cfg.validate()
        self.cfg = cfg
        child = (lambda n: rng.child(n)) if rng is not None else (lambda n: None)
        self.entry = EntryFlow(cfg, child("entry"))
        if cfg.middle_flow_kind == "fused":
            self.middle = MiddleFlowFused(cfg, child("middle"))
        else:
            self.middle = MiddleFlowOriginal(cfg, child("middle"))
        self.exit = ExitFlow(cfg, child("exit"))

    def forward(self, x, mode: str = "eval", trace: list | None = None) -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        h_exp, w_exp = self.cfg.input_size
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (h_exp, w_exp):
            raise ShapeError(f"input: expected (B, 3, {h_exp}, {w_exp}), got {x.shape}")
        ctx = ForwardCtx(mode, trace)
        h = self.entry.forward(x, ctx)
        h = self.middle.forward(h, ctx)
        return self.exit.forward(h, ctx)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self.named_params(""):
            if name in out:
                raise ValueError(f"duplicate parameter name {name}")
            out[name] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.named_buffers(""))

    def load_buffers(self, values: dict[str, np.ndarray]):
        for mod_name, mod in self.named_modules(""):
            if isinstance(mod, BatchNorm):
                for attr in ("running_mean", "running_var"):
                    key = _join(mod_name, attr)
                    if key in values:
                        mod.set_buffer(attr, values[key])

    def state_snapshot(self) -> dict[str, np.ndarray]:
        snap = {name: p.data.copy() for name, p in self.params().items()}
        snap.update({name: b.copy() for name, b in self.buffers().items()})
        return snap

    def load_state_snapshot(self, snap: dict[str, np.ndarray]):
        for name, p in self.params().items():
            p.data = snap[name].copy()
        self.load_buffers(snap)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Fully initialised model; parameter draws are keyed by dotted name."""
    return Model(cfg, Rng(seed))


def shape_trace(cfg: ModelConfig) -> ShapeTrace:
    """Symbolic shape propagation through the configured architecture.

    Allocates no feature maps or parameters; raises a ShapeError naming the
    offending layer on any contract violation.
    """
    structure = Model(cfg, rng=None)
    rows: list = []
    h, w = cfg.input_size
    shape = (3, h, w)
    shape = structure.entry.trace_shapes(shape, rows)
    shape = structure.middle.trace_shapes(shape, rows)
    structure.exit.trace_shapes(shape, rows)
    return ShapeTrace(rows)


def param_count(model: Model) -> int:
    return sum(p.size for p in model.params().values())


def param_diff(model_a: Model, model_b: Model) -> tuple[list[str], list[str]]:
    """Parameter names present in exactly one of the two models."""
    names_a, names_b = set(model_a.params()), set(model_b.params())
    return sorted(names_a - names_b), sorted(names_b - names_a)


def middle_block_count(model: Model) -> int:
    return sum(1 for _, m in model.named_modules("") if isinstance(m, MiddleBlock))


def cbam_count(model: Model) -> int:
    return sum(1 for _, m in model.named_modules("") if isinstance(m, Cbam))


def connectivity_report(loss: Tensor, params: dict[str, Tensor]
                        ) -> tuple[list[str], list[str]]:
    """(structurally disconnected, connected-but-zero-gradient) parameter names.

    Call after ``backward(loss)``.  A parameter is disconnected when the loss
    graph never reaches it; a zero gradient on a connected parameter usually
    just means a dead ReLU region for this batch.
    """
    reached = reached_leaves(loss)
    disconnected, zero_grad = [], []
    for name, p in params.items():
        if id(p) not in reached:
            disconnected.append(name)
        elif p.grad is not None and not np.any(p.grad):
            zero_grad.append(name)
    return disconnected, zero_grad
