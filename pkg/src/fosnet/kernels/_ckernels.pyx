# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for NHWC tensors.

Same contract as ``_pykernels``; padding is applied implicitly (out-of-range
taps read as zero) so no padded copy of the input is materialised.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def out_size(Py_ssize_t n, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (n + 2 * pad - k) // stride + 1


cdef void _im2col(const real[:, :, :, ::1] x, real[:, ::1] cols,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad,
                  Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t b, oy, ox, i, j, ch, iy, ix, row, col
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    for b in range(nb):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                col = 0
                for i in range(kh):
                    iy = oy * stride + i - pad
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if iy < 0 or iy >= h or ix < 0 or ix >= w:
                            for ch in range(c):
                                cols[row, col + ch] = 0
                        else:
                            for ch in range(c):
                                cols[row, col + ch] = x[b, iy, ix, ch]
                        col += c


cdef void _col2im(const real[:, ::1] cols, real[:, :, :, ::1] out,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad,
                  Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t b, oy, ox, i, j, ch, iy, ix, row, col
    cdef Py_ssize_t nb = out.shape[0], h = out.shape[1], w = out.shape[2], c = out.shape[3]
    for b in range(nb):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                col = 0
                for i in range(kh):
                    iy = oy * stride + i - pad
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if 0 <= iy < h and 0 <= ix < w:
                            for ch in range(c):
                                out[b, iy, ix, ch] += cols[row, col + ch]
                        col += c


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = out_size(h, kh, stride, pad), wo = out_size(w, kw, stride, pad)
    cols = np.empty((nb * ho * wo, kh * kw * c), dtype=x.dtype)
    if x.dtype == np.float64:
        _im2col[double](x, cols, kh, kw, stride, pad, ho, wo)
    elif x.dtype == np.float32:
        _im2col[float](x, cols, kh, kw, stride, pad, ho, wo)
    else:
        raise TypeError(f"im2col: unsupported dtype {x.dtype}")
    return cols


def col2im(cols, x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cols = np.ascontiguousarray(cols)
    nb, h, w, c = x_shape
    cdef Py_ssize_t ho = out_size(h, kh, stride, pad), wo = out_size(w, kw, stride, pad)
    out = np.zeros((nb, h, w, c), dtype=cols.dtype)
    if cols.dtype == np.float64:
        _col2im[double](cols, out, kh, kw, stride, pad, ho, wo)
    elif cols.dtype == np.float32:
        _col2im[float](cols, out, kh, kw, stride, pad, ho, wo)
    else:
        raise TypeError(f"col2im: unsupported dtype {cols.dtype}")
    return out
