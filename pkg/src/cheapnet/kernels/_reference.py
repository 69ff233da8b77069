"""Pure-numpy convolution kernels.

Every kernel takes an already zero-padded NCHW input so that padding and
cropping stay in the autodiff layer.  These are the fallback used when the
compiled extension is not importable, and the reference the extension is
tested against.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, k, stride, out_h, out_w):
    """Unfold ``xp`` [N, C, Hp, Wp] into columns [N, C*k*k, out_h*out_w]."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]
    # [N, C, Ho, Wo, k, k] -> [N, C, k, k, Ho, Wo]
    cols = win.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(cols).reshape(n, c * k * k, out_h * out_w)


def col2im(cols, padded_shape, k, stride, out_h, out_w):
    n, c, hp, wp = padded_shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, out_h, out_w)
    he = stride * (out_h - 1) + 1
    we = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + he : stride, j : j + we : stride] += cols[:, :, i, j]
    return out


def depthwise_forward(xp, w, stride, out_h, out_w):
    n, c = xp.shape[:2]
    k = w.shape[1]
    out = np.zeros((n, c, out_h, out_w), dtype=xp.dtype)
    he = stride * (out_h - 1) + 1
    we = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            out += w[None, :, i, j, None, None] * xp[:, :, i : i + he : stride, j : j + we : stride]
    return out


def depthwise_backward(xp, w, gout, stride):
    """Return (grad wrt padded input, grad wrt kernel)."""
    k = w.shape[1]
    out_h, out_w = gout.shape[2:]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    he = stride * (out_h - 1) + 1
    we = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            window = xp[:, :, i : i + he : stride, j : j + we : stride]
            dw[:, i, j] = np.einsum("nchw,nchw->c", gout, window)
            dxp[:, :, i : i + he : stride, j : j + we : stride] += w[None, :, i, j, None, None] * gout
    return dxp, dw


def _cell_groups(cells, k):
    for cell in np.unique(cells):
        yield int(cell) // k, int(cell) % k, np.flatnonzero(cells == cell)


def shift_forward(xp, cells, k, stride, out_h, out_w):
    """out[n, c, h, w] = xp[n, c, stride*h + i_c, stride*w + j_c] with (i_c, j_c) = divmod(cells[c], k)."""
    n, c = xp.shape[:2]
    out = np.empty((n, c, out_h, out_w), dtype=xp.dtype)
    he = stride * (out_h - 1) + 1
    we = stride * (out_w - 1) + 1
    for i, j, chans in _cell_groups(cells, k):
        out[:, chans] = xp[:, chans, i : i + he : stride, j : j + we : stride]
    return out


def shift_backward(gout, cells, k, stride, padded_shape):
    out_h, out_w = gout.shape[2:]
    dxp = np.zeros(padded_shape, dtype=gout.dtype)
    he = stride * (out_h - 1) + 1
    we = stride * (out_w - 1) + 1
    for i, j, chans in _cell_groups(cells, k):
        dxp[:, chans, i : i + he : stride, j : j + we : stride] = gout[:, chans]
    return dxp
