"""Independent reference implementations, written as plain loops.

Nothing here imports the package's numerical code, so agreement with the
vectorised versions is a genuine cross-check.
"""
from fractions import Fraction

import numpy as np


def scl_loops(o):
    """Scene coherence loss of one (N, M, C) grid, quadruple loop."""
    n, m, c = o.shape
    total = 0.0
    for k in range(c):
        s = 0.0
        for i in range(n):
            for j in range(m):
                if i + 1 < n:
                    s += (o[i + 1, j, k] - o[i, j, k]) ** 2
                if j + 1 < m:
                    s += (o[i, j + 1, k] - o[i, j, k]) ** 2
        total += s / ((n - 1) * m + n * (m - 1))
    return total / c


def conv_loops(x, w, b, stride=1, pad=0):
    """Zero-padded convolution of (H, W, Din) with (kh, kw, Din, Dout)."""
    h, wd, din = x.shape
    kh, kw, _, dout = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((ho, wo, dout))
    for i in range(ho):
        for j in range(wo):
            for o in range(dout):
                acc = b[o]
                for u in range(kh):
                    for v in range(kw):
                        r, c = i * stride + u - pad, j * stride + v - pad
                        if 0 <= r < h and 0 <= c < wd:
                            for d in range(din):
                                acc += x[r, c, d] * w[u, v, d, o]
                out[i, j, o] = acc
    return out


def pad_count_scale(h, w, kh, kw, stride, pad):
    """Exact scale kk/(kk - #padded cells) per output position, by counting."""
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = [[None] * wo for _ in range(ho)]
    for i in range(ho):
        for j in range(wo):
            padded = 0
            for u in range(kh):
                for v in range(kw):
                    r, c = i * stride + u - pad, j * stride + v - pad
                    if not (0 <= r < h and 0 <= c < w):
                        padded += 1
            out[i][j] = Fraction(kh * kw, kh * kw - padded)
    return out


def gap_loops(x):
    n, m, d = x.shape
    out = [0.0] * d
    for k in range(d):
        for i in range(n):
            for j in range(m):
                out[k] += x[i, j, k]
        out[k] /= n * m
    return np.array(out)


def matvec_loops(W, x, b=None):
    rows, cols = W.shape
    out = []
    for r in range(rows):
        acc = 0.0 if b is None else b[r]
        for c in range(cols):
            acc += W[r, c] * x[c]
        out.append(acc)
    return np.array(out)


def sigmoid_scalar(z):
    return 1.0 / (1.0 + np.exp(-z)) if z >= 0 else np.exp(z) / (1.0 + np.exp(z))


def softmax_ce_scalar(z, label):
    zmax = max(z)
    log_sum = zmax + np.log(sum(np.exp(v - zmax) for v in z))
    return log_sum - z[label]


def topk_loops(row, k):
    """k largest entries, ties to the lower index, by repeated selection."""
    chosen = []
    for _ in range(k):
        best = None
        for i, v in enumerate(row):
            if i in chosen:
                continue
            if best is None or v > row[best]:
                best = i
        chosen.append(best)
    return chosen


def bayes_scene_accuracy(cooc, prior=None):
    """Exact accuracy of the MAP scene given the full object-presence pattern,
    objects drawn independently per scene with probability ``cooc[o, s]``."""
    n_obj, n_scene = cooc.shape
    prior = np.full(n_scene, 1.0 / n_scene) if prior is None else prior
    acc = 0.0
    for pattern in range(2 ** n_obj):
        bits = [(pattern >> o) & 1 for o in range(n_obj)]
        joint = []
        for s in range(n_scene):
            p = prior[s]
            for o in range(n_obj):
                p *= cooc[o, s] if bits[o] else 1 - cooc[o, s]
            joint.append(p)
        acc += max(joint)
    return acc
