"""Convolution variants, normalisation, pooling and the module containers.

Feature maps are NCHW.  Convolutions are bias-free cross-correlations with
symmetric zero padding; kernel layouts are

* standard / group: ``[C_out, C_in // groups, K, K]``
* depthwise:        ``[C, K, K]``
* pointwise:        ``[C_out, C_in]``
* shift:            no weights, one kernel cell per channel (:class:`ShiftSpec`)
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import Parameter, Tensor, ShapeError, relu, subsample

CONV_KINDS = ("standard", "group", "depthwise", "shift", "pointwise")
CHEAP_KINDS = ("group", "depthwise", "shift")


@dataclass(frozen=True)
class ConvSpec:
    kind: str
    kernel_size: int
    in_channels: int
    out_channels: int
    groups: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise ValueError(f"unknown conv kind {self.kind!r}")
        if min(self.kernel_size, self.in_channels, self.out_channels, self.groups, self.stride) < 1:
            raise ValueError(f"non-positive field in {self}")
        if self.padding < 0:
            raise ValueError(f"negative padding in {self}")
        if self.in_channels % self.groups:
            raise ValueError(f"groups={self.groups} does not divide in_channels={self.in_channels}")
        if self.kind == "depthwise" and self.groups not in (1, self.in_channels):
            raise ValueError("depthwise convolution has one group per input channel")
        if self.kind == "pointwise" and (self.kernel_size != 1 or self.groups != 1):
            raise ValueError("pointwise convolution has K=1 and a single group")

    @property
    def group_width(self):
        """Channels per group, C_in / g."""
        return self.in_channels // self.groups

    def out_size(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(f"kernel {k} larger than padded input {h + 2 * p}x{w + 2 * p}")
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


@dataclass(frozen=True)
class ShiftSpec:
    """Per-channel one-hot kernel positions (1-based row, column in the K x K grid)."""

    kernel_size: int
    offsets: tuple = field(default_factory=tuple)

    def __post_init__(self):
        k = self.kernel_size
        for c, (i, j) in enumerate(self.offsets):
            if not (1 <= i <= k and 1 <= j <= k):
                raise ValueError(f"shift offset ({i}, {j}) of channel {c} outside [1..{k}]^2")

    @classmethod
    def round_robin(cls, channels, kernel_size):
        """Channel c takes grid cell c mod K^2 in row-major order."""
        k2 = kernel_size * kernel_size
        cells = (divmod(c % k2, kernel_size) for c in range(channels))
        return cls(kernel_size, tuple((i + 1, j + 1) for i, j in cells))

    @property
    def cells(self):
        k = self.kernel_size
        return np.array([(i - 1) * k + (j - 1) for i, j in self.offsets], dtype=np.int_)

    def one_hot_kernels(self, dtype=np.float64):
        k = self.kernel_size
        out = np.zeros((len(self.offsets), k, k), dtype=dtype)
        for c, (i, j) in enumerate(self.offsets):
            out[c, i - 1, j - 1] = 1
        return out


# -- functional convolutions ---------------------------------------------
def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(xp, p):
    if p == 0:
        return xp
    return xp[:, :, p:-p, p:-p]


def _check_input(x, spec):
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, conv expects {spec.in_channels}")


def _grouped_conv(x, k, spec, groups, op):
    _check_input(x, spec)
    c_out, cg, kh, kw = k.shape
    if kh != spec.kernel_size or kw != spec.kernel_size or cg * groups != spec.in_channels or c_out % groups:
        raise ShapeError(f"kernel shape {k.shape} inconsistent with {spec}")
    n = x.shape[0]
    ks, s, p = spec.kernel_size, spec.stride, spec.padding
    out_h, out_w = spec.out_size(*x.shape[2:])
    xp = _pad(x.data, p)
    cols = kernels.im2col(xp, ks, s, out_h, out_w).reshape(n, groups, cg * ks * ks, out_h * out_w)
    wg = k.data.reshape(groups, c_out // groups, cg * ks * ks)
    out = np.matmul(wg[None], cols).reshape(n, c_out, out_h, out_w)

    def backward(g):
        gg = g.reshape(n, groups, c_out // groups, out_h * out_w)
        if k.requires_grad:
            dw = np.matmul(gg, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            k._accumulate(dw.reshape(k.shape))
        if x.requires_grad:
            dcols = np.matmul(wg.transpose(0, 2, 1)[None], gg).reshape(n, spec.in_channels * ks * ks, -1)
            dxp = kernels.col2im(dcols, xp.shape, ks, s, out_h, out_w)
            x._accumulate(_unpad(dxp, p))

    return Tensor._make(out, (x, k), backward, op)


def conv_standard(x, k, spec):
    """Dense K x K convolution mixing all input channels."""
    return _grouped_conv(x, k, spec, 1, "conv_standard")


def conv_group(x, k, spec):
    """Grouped convolution: output group r only sees input channel group r."""
    if spec.in_channels % spec.groups:
        raise ValueError(f"groups={spec.groups} does not divide in_channels={spec.in_channels}")
    return _grouped_conv(x, k, spec, spec.groups, "conv_group")


def conv_depthwise(x, k, spec):
    """One K x K filter per channel, no cross-channel mixing."""
    _check_input(x, spec)
    if k.shape != (spec.in_channels, spec.kernel_size, spec.kernel_size):
        raise ShapeError(f"depthwise kernel shape {k.shape} inconsistent with {spec}")
    s, p = spec.stride, spec.padding
    out_h, out_w = spec.out_size(*x.shape[2:])
    xp = _pad(x.data, p)
    out = kernels.depthwise_forward(xp, k.data, s, out_h, out_w)

    def backward(g):
        dxp, dw = kernels.depthwise_backward(xp, k.data, g, s)
        if k.requires_grad:
            k._accumulate(dw)
        if x.requires_grad:
            x._accumulate(_unpad(dxp, p))

    return Tensor._make(out, (x, k), backward, "conv_depthwise")


def conv_shift(x, spec, shifts):
    """Move each channel by its fixed offset; reads outside the map are zero."""
    _check_input(x, spec)
    if len(shifts.offsets) != spec.in_channels:
        raise ShapeError(f"shift spec has {len(shifts.offsets)} offsets for {spec.in_channels} channels")
    if shifts.kernel_size != spec.kernel_size:
        raise ShapeError("shift spec and conv spec disagree on kernel size")
    ks, s, p = spec.kernel_size, spec.stride, spec.padding
    out_h, out_w = spec.out_size(*x.shape[2:])
    cells = shifts.cells
    xp = _pad(x.data, p)
    padded_shape = xp.shape
    out = kernels.shift_forward(xp, cells, ks, s, out_h, out_w)

    def backward(g):
        x._accumulate(_unpad(kernels.shift_backward(g, cells, ks, s, padded_shape), p))

    return Tensor._make(out, (x,), backward, "conv_shift")


def conv_pointwise(x, k, stride=1):
    """1 x 1 convolution with kernel [C_out, C_in]."""
    if x.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ShapeError(f"pointwise kernel {k.shape} does not match input {x.shape}")
    xd = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
    n, c, h, w = xd.shape
    flat = xd.reshape(n, c, h * w)
    out = np.matmul(k.data, flat).reshape(n, k.shape[0], h, w)

    def backward(g):
        gf = g.reshape(n, k.shape[0], h * w)
        if k.requires_grad:
            k._accumulate(np.matmul(gf, flat.transpose(0, 2, 1)).sum(axis=0))
        if x.requires_grad:
            dx = np.matmul(k.data.T, gf).reshape(n, c, h, w)
            if stride > 1:
                full = np.zeros_like(x.data)
                full[:, :, ::stride, ::stride] = dx
                dx = full
            x._accumulate(dx)

    return Tensor._make(out, (x, k), backward, "conv_pointwise")


# -- normalisation, activations, pooling, classifier ----------------------
def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Per-channel batch norm over (N, H, W).

    ``running_mean`` / ``running_var`` are updated in place in training mode as
    ``r <- momentum * r + (1 - momentum) * batch_stat``.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm params {gamma.shape}/{beta.shape} do not match input {x.shape}")
    axes = (0, 2, 3)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = xd.size // xd.shape[1]
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * (var * m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data[None, :, None, None]
            if training:
                gx = gx - gx.mean(axis=axes, keepdims=True) - xhat * (gx * xhat).mean(axis=axes, keepdims=True)
            x._accumulate(gx * inv[None, :, None, None])

    return Tensor._make(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "batchnorm")


def gap(x):
    """Global average pooling [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ShapeError(f"gap expects NCHW, got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / hw, x.shape))

    return Tensor._make(x.data.mean(axis=(2, 3)), (x,), backward, "gap")


def avgpool2(x):
    """2 x 2 average pooling, stride 2 (odd trailing rows/cols dropped)."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    xd = x.data[:, :, : 2 * ho, : 2 * wo]
    out = xd.reshape(n, c, ho, 2, wo, 2).mean(axis=(3, 5))

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, :, : 2 * ho, : 2 * wo] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        x._accumulate(full)

    return Tensor._make(out, (x,), backward, "avgpool2")


def fc(x, w, b):
    """Affine classifier: x [N, C] @ w.T + b with w [classes, C]."""
    if x.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"fc weights {w.shape}/{b.shape} do not match input {x.shape}")

    def backward(g):
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ w.data)

    return Tensor._make(x.data @ w.data.T + b.data, (x, w, b), backward, "fc")


# -- modules ---------------------------------------------------------------
class Module:
    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{key}.{i}.")
        yield from self._own_buffers(prefix)

    def _own_buffers(self, prefix):
        return iter(())

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data[...] = state[name]
        for name, b in bufs.items():
            if state[name].shape != b.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != model shape {b.shape}")
            b[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng, shape, fan_in, dtype, gain=2.0):
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)


class Conv(Module):
    """A single convolution layer described by a :class:`ConvSpec`.

    ``group`` / ``depthwise`` / ``shift`` here are the bare spatial stages; use
    :class:`CheapConv` for the spatial + pointwise replacement of a standard conv.
    """

    def __init__(self, spec, rng, dtype=np.float32):
        self.spec = spec
        k = spec.kernel_size
        if spec.kind in ("standard", "group"):
            g = spec.groups if spec.kind == "group" else 1
            fan_in = spec.in_channels // g * k * k
            self.weight = Parameter(he_normal(rng, (spec.out_channels, spec.in_channels // g, k, k), fan_in, dtype))
        elif spec.kind == "depthwise":
            self.weight = Parameter(he_normal(rng, (spec.in_channels, k, k), k * k, dtype))
        elif spec.kind == "pointwise":
            self.weight = Parameter(he_normal(rng, (spec.out_channels, spec.in_channels), spec.in_channels, dtype))
        else:
            self.shifts = ShiftSpec.round_robin(spec.in_channels, k)

    def forward(self, x):
        kind = self.spec.kind
        if kind == "standard":
            return conv_standard(x, self.weight, self.spec)
        if kind == "group":
            return conv_group(x, self.weight, self.spec)
        if kind == "depthwise":
            return conv_depthwise(x, self.weight, self.spec)
        if kind == "pointwise":
            return conv_pointwise(x, self.weight, self.spec.stride)
        return conv_shift(x, self.spec, self.shifts)


class CheapConv(Module):
    """Cheap spatial stage (C_in -> C_in, stride 1) followed by a pointwise conv.

    A strided replacement evaluates both stages at the input resolution and
    then subsamples, which is what the cost model charges for.
    """

    def __init__(self, kind, in_channels, out_channels, kernel_size, stride, groups, rng, dtype=np.float32):
        if kind not in CHEAP_KINDS:
            raise ValueError(f"cheap kind must be one of {CHEAP_KINDS}, got {kind!r}")
        g = {"group": groups, "depthwise": in_channels, "shift": 1}[kind]
        self.stride = stride
        self.spatial = Conv(ConvSpec(kind, kernel_size, in_channels, in_channels, groups=g,
                                     padding=kernel_size // 2), rng, dtype)
        self.pointwise = Conv(ConvSpec("pointwise", 1, in_channels, out_channels), rng, dtype)

    def forward(self, x):
        return subsample(self.pointwise(self.spatial(x)), self.stride)


def make_conv(kind, in_channels, out_channels, kernel_size, stride, rng, groups=1, dtype=np.float32):
    """Build the layer realising a descriptor conv: standard K x K, 1 x 1, or a cheap pair."""
    if kind == "standard" or kernel_size == 1:
        ck = "pointwise" if kernel_size == 1 else "standard"
        return Conv(ConvSpec(ck, kernel_size, in_channels, out_channels, stride=stride,
                             padding=kernel_size // 2), rng, dtype)
    return CheapConv(kind, in_channels, out_channels, kernel_size, stride, groups, rng, dtype)


class BatchNorm(Module):
    def __init__(self, channels, dtype=np.float32, momentum=0.9, eps=1e-5):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def _own_buffers(self, prefix):
        yield f"{prefix}running_mean", self.running_mean
        yield f"{prefix}running_var", self.running_var

    def forward(self, x):
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                         self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        self.weight = Parameter(he_normal(rng, (out_features, in_features), in_features, dtype, gain=1.0))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x):
        return fc(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x):
        return relu(x)
