"""Independent oracles shared by the test modules: finite differences and naive loops."""
import numpy as np

from cheapnet.tensor import Tensor


def numeric_grad(f, arrays, eps=1e-6):
    """Central finite differences of scalar ``f()`` w.r.t. each array (perturbed in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f()
            a[i] = old - eps
            lo = f()
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def check_grads(build, arrays, eps=1e-6):
    """Compare reverse-mode gradients of ``build(*tensors)`` with finite differences.

    Returns the worst relative error over all inputs.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f():
        return float(build(*[Tensor(t.data) for t in tensors]).data)

    numeric = numeric_grad(f, [t.data for t in tensors], eps)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


def check_module_grads(loss_fn, params, eps=1e-6):
    """Finite-difference check of ``loss_fn()`` (returning a Tensor) w.r.t. Parameters."""
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    numeric = numeric_grad(lambda: float(loss_fn().data), [p.data for p in params], eps)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


# -- naive convolution references ------------------------------------------------
def _padded(x, pad):
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def naive_conv(x, w, stride=1, pad=0, groups=1):
    """Grouped cross-correlation by explicit loops; w is [C_out, C_in/groups, K, K]."""
    n, c_in, h, wd = x.shape
    c_out, cg, k, _ = w.shape
    xp = _padded(x, pad)
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    per_group = c_out // groups
    for b in range(n):
        for o in range(c_out):
            g = o // per_group
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cg):
                        for u in range(k):
                            for v in range(k):
                                acc += w[o, ci, u, v] * xp[b, g * cg + ci, i * stride + u, j * stride + v]
                    out[b, o, i, j] = acc
    return out


def naive_depthwise(x, w, stride=1, pad=0):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    xp = _padded(x, pad)
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[b, ch, i, j] = sum(w[ch, u, v] * xp[b, ch, i * stride + u, j * stride + v]
                                           for u in range(k) for v in range(k))
    return out


def naive_shift(x, offsets, k, stride=1, pad=0):
    """Shift with 1-based (row, col) offsets in the K x K grid: a one-hot depthwise conv."""
    n, c, h, wd = x.shape
    xp = _padded(x, pad)
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for ch, (r, q) in enumerate(offsets):
        for i in range(oh):
            for j in range(ow):
                out[:, ch, i, j] = xp[:, ch, i * stride + r - 1, j * stride + q - 1]
    return out


def random_conv_case(seed):
    """A random small conv problem; cycles through the four kinds by seed."""
    rng = np.random.default_rng(seed)
    kind = ("standard", "group", "depthwise", "shift")[seed % 4]
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k // 2 + 1))
    groups = int(rng.choice([2, 3])) if kind == "group" else 1
    c_in = groups * int(rng.integers(1, 4))
    c_out = c_in if kind in ("depthwise", "shift") else groups * int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(max(k - 2 * pad, 1), 8, size=2))
    x = rng.standard_normal((int(rng.integers(1, 3)), c_in, h, w))
    return rng, kind, k, stride, pad, groups, c_in, c_out, x
