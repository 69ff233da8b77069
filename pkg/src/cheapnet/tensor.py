"""Dense tensors with reverse-mode autodiff.

Each op that involves a tensor requiring grad records its parents and a
backward closure on the output.  ``Tensor.backward`` linearises the recorded
graph into a :class:`Tape` (topological order) and walks it in reverse,
accumulating gradients additively into every node.

Broadcasting is deliberately narrow: operands must have the same rank (or one
is a scalar) and each dimension must either match or be 1.
"""
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class ShapeError(ValueError):
    pass


def _as_array(x, dtype=None):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _make(cls, data, parents, backward, op):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self):
        return self.shape[0]

    # -- autodiff ------------------------------------------------------
    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = Tape.from_root(self)
        for node in tape.nodes:
            if not isinstance(node, Parameter):
                node.grad = None
        self._accumulate(grad)
        for node in reversed(tape.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        return tape

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A learnable tensor with persistent gradient and momentum buffers."""

    __slots__ = ("momentum_buf", "name")

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.momentum_buf = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad.fill(0)

    def _accumulate(self, g):
        self.grad += g

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Recorded ops of one graph, inputs always before their consumers."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def parameters(self):
        return [n for n in self.nodes if isinstance(n, Parameter)]


def tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def broadcast_shape(a, b):
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise ShapeError(f"cannot broadcast shapes {a} and {b}: ranks differ")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}")
    return tuple(out)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of singleton broadcasting)."""
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise ---------------------------------------------------------
def elementwise(op_kind, a, b=None):
    ops = {"add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "exp": exp, "log": log,
           "relu": relu, "sqrt": sqrt}
    if op_kind not in ops:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return ops[op_kind](a) if b is None else ops[op_kind](a, b)


def _binary(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    shape = broadcast_shape(a.shape, b.shape)
    return a, b, shape


def add(a, b):
    a, b, _ = _binary(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(g, b.shape))

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b, _ = _binary(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(-g, b.shape))

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b, _ = _binary(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(g * a.data, b.shape))

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b, _ = _binary(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._make(a.data / b.data, (a, b), backward, "div")


def neg(a):
    def backward(g):
        a._accumulate(-g)

    return Tensor._make(-a.data, (a,), backward, "neg")


def power(a, p):
    p = float(p)

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return Tensor._make(a.data**p, (a,), backward, "pow")


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return Tensor._make(out_data, (a,), backward, "exp")


def log(a):
    def backward(g):
        a._accumulate(g / a.data)

    return Tensor._make(np.log(a.data), (a,), backward, "log")


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return Tensor._make(out_data, (a,), backward, "sqrt")


def clamp_min(a, lo):
    mask = a.data > lo

    def backward(g):
        a._accumulate(g * mask)

    return Tensor._make(np.maximum(a.data, lo).astype(a.dtype, copy=False), (a,), backward, "clamp_min")


def relu(a):
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return Tensor._make(a.data * mask, (a,), backward, "relu")


# -- reductions and shape ops -------------------------------------------
def tsum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor._make(a.data.reshape(shape), (a,), backward, "reshape")


def index(a, idx):
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return Tensor._make(a.data[idx], (a,), backward, "index")


def matmul(a, b):
    a = tensor(a)
    b = tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [M,K] x [K,N], got {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def concat_channels(tensors):
    """Concatenate NCHW (or NC) tensors along the channel axis."""
    tensors = [tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {t.shape} does not match {ref} outside the channel axis")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[:, lo:hi])

    data = np.concatenate([t.data for t in tensors], axis=1)
    return Tensor._make(data, tensors, backward, "concat")


def slice_channels(a, lo, hi):
    def backward(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        a._accumulate(full)

    return Tensor._make(a.data[:, lo:hi], (a,), backward, "slice")


def subsample(a, stride):
    """Keep every ``stride``-th spatial position of an NCHW tensor."""
    if stride == 1:
        return a

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, :, ::stride, ::stride] = g
        a._accumulate(full)

    return Tensor._make(np.ascontiguousarray(a.data[:, :, ::stride, ::stride]), (a,), backward, "subsample")


def pad_channels(a, before, after):
    """Zero-pad the channel axis of an NCHW tensor."""
    c = a.shape[1]

    def backward(g):
        a._accumulate(g[:, before : before + c])

    data = np.pad(a.data, ((0, 0), (before, after), (0, 0), (0, 0)))
    return Tensor._make(data, (a,), backward, "pad_channels")


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def backward(g):
        a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out_data, (a,), backward, "log_softmax")


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)))

    return Tensor._make(out_data, (a,), backward, "softmax")


def row_norm(a, eps=0.0):
    """Euclidean norm of each row of a 2-D tensor; zero rows get a zero subgradient."""
    norms = np.sqrt((a.data * a.data).sum(axis=1) + eps)

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        scale = np.where(norms > 0, g / safe, 0.0)
        a._accumulate(a.data * scale[:, None])

    return Tensor._make(norms, (a,), backward, "row_norm")


def ones_like(a):
    return Tensor(np.ones_like(_as_array(a)))


def zeros_like(a):
    return Tensor(np.zeros_like(_as_array(a)))
