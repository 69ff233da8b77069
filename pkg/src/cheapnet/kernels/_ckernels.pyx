# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.  Same contracts as ``_reference``."""
import numpy as np

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] xp, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t n_b = xp.shape[0], n_c = xp.shape[1]
    cdef Py_ssize_t n, c, i, j, h, w, row, col
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n_b, n_c * k * k, out_h * out_w), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    with nogil:
        for n in range(n_b):
            for c in range(n_c):
                for i in range(k):
                    for j in range(k):
                        row = (c * k + i) * k + j
                        col = 0
                        for h in range(out_h):
                            for w in range(out_w):
                                cols[n, row, col] = xp[n, c, stride * h + i, stride * w + j]
                                col += 1
    return out


def col2im(const real[:, :, ::1] cols, tuple padded_shape, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t n_b = padded_shape[0], n_c = padded_shape[1]
    cdef Py_ssize_t n, c, i, j, h, w, row, col
    dtype = np.float32 if real is float else np.float64
    out = np.zeros(padded_shape, dtype=dtype)
    cdef real[:, :, :, ::1] xp = out
    with nogil:
        for n in range(n_b):
            for c in range(n_c):
                for i in range(k):
                    for j in range(k):
                        row = (c * k + i) * k + j
                        col = 0
                        for h in range(out_h):
                            for w in range(out_w):
                                xp[n, c, stride * h + i, stride * w + j] += cols[n, row, col]
                                col += 1
    return out


def depthwise_forward(const real[:, :, :, ::1] xp, const real[:, :, ::1] wt, Py_ssize_t stride,
                      Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t n_b = xp.shape[0], n_c = xp.shape[1], k = wt.shape[1]
    cdef Py_ssize_t n, c, i, j, h, w
    cdef real acc
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n_b, n_c, out_h, out_w), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for n in range(n_b):
            for c in range(n_c):
                for h in range(out_h):
                    for w in range(out_w):
                        acc = 0
                        for i in range(k):
                            for j in range(k):
                                acc = acc + wt[c, i, j] * xp[n, c, stride * h + i, stride * w + j]
                        o[n, c, h, w] = acc
    return out


def depthwise_backward(const real[:, :, :, ::1] xp, const real[:, :, ::1] wt, const real[:, :, :, ::1] gout,
                       Py_ssize_t stride):
    cdef Py_ssize_t n_b = xp.shape[0], n_c = xp.shape[1], k = wt.shape[1]
    cdef Py_ssize_t out_h = gout.shape[2], out_w = gout.shape[3]
    cdef Py_ssize_t n, c, i, j, h, w
    cdef real g
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((n_b, n_c, xp.shape[2], xp.shape[3]), dtype=dtype)
    dw_arr = np.zeros((n_c, k, k), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef real[:, :, ::1] dw = dw_arr
    with nogil:
        for n in range(n_b):
            for c in range(n_c):
                for h in range(out_h):
                    for w in range(out_w):
                        g = gout[n, c, h, w]
                        for i in range(k):
                            for j in range(k):
                                dw[c, i, j] += g * xp[n, c, stride * h + i, stride * w + j]
                                dx[n, c, stride * h + i, stride * w + j] += g * wt[c, i, j]
    return dx_arr, dw_arr


def shift_forward(const real[:, :, :, ::1] xp, const long[::1] cells, Py_ssize_t k, Py_ssize_t stride,
                  Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t n_b = xp.shape[0], n_c = xp.shape[1]
    cdef Py_ssize_t n, c, h, w, di, dj
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n_b, n_c, out_h, out_w), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for n in range(n_b):
            for c in range(n_c):
                di = cells[c] // k
                dj = cells[c] % k
                for h in range(out_h):
                    for w in range(out_w):
                        o[n, c, h, w] = xp[n, c, stride * h + di, stride * w + dj]
    return out


def shift_backward(const real[:, :, :, ::1] gout, const long[::1] cells, Py_ssize_t k, Py_ssize_t stride,
                   tuple padded_shape):
    cdef Py_ssize_t n_b = gout.shape[0], n_c = gout.shape[1]
    cdef Py_ssize_t out_h = gout.shape[2], out_w = gout.shape[3]
    cdef Py_ssize_t n, c, h, w, di, dj
    dtype = np.float32 if real is float else np.float64
    out = np.zeros(padded_shape, dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    with nogil:
        for n in range(n_b):
            for c in range(n_c):
                di = cells[c] // k
                dj = cells[c] % k
                for h in range(out_h):
                    for w in range(out_w):
                        dx[n, c, stride * h + di, stride * w + dj] = gout[n, c, h, w]
    return out
