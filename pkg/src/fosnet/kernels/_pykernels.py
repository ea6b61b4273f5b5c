"""Pure numpy implementations of the convolution hot loops.

Layout is NHWC throughout.  Column rows are ordered (batch, out_row, out_col)
and column entries (kernel_row, kernel_col, channel), matching a weight tensor
of shape (kh, kw, C_in, C_out) reshaped to (kh*kw*C_in, C_out).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    b, h, w, c = x.shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (b, ho, wo, c, kh, kw) -> (b, ho, wo, kh, kw, c)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, kh * kw * c)


def col2im(cols, x_shape, kh, kw, stride, pad):
    b, h, w, c = x_shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    cols = cols.reshape(b, ho, wo, kh, kw, c)
    gp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            gp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    return gp[:, pad:pad + h, pad:pad + w, :]
