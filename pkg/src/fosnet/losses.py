"""Scene coherence loss, grid-pooled cross-entropy and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, mean, mul, no_grad, record, softmax_cross_entropy


@dataclass(frozen=True)
class Label:
    onehot: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.onehot)
        if v.ndim != 1 or not np.isin(v, (0, 1)).all() or v.sum() != 1:
            raise ValueError(f"label must be a one-hot vector, got {v}")

    @classmethod
    def from_index(cls, index: int, num_classes: int) -> "Label":
        if not 0 <= index < num_classes:
            raise ValueError(f"class index {index} out of range for {num_classes} classes")
        v = np.zeros(num_classes, dtype=np.int64)
        v[index] = 1
        return cls(v)

    @property
    def index(self) -> int:
        return int(np.argmax(self.onehot))

    @property
    def num_classes(self) -> int:
        return len(self.onehot)


@dataclass
class LossBreakdown:
    classification: float
    coherence: float
    total: float
    gamma: float
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)


def _check_grid(o: Tensor) -> None:
    if o.ndim not in (3, 4):
        raise ShapeError(f"grid scores must be (N, M, C) or (B, N, M, C), got {o.shape}")
    if o.shape[-1] < 2:
        raise ShapeError(f"grid scores need at least 2 classes, got {o.shape[-1]}")


def scene_coherence_loss(o: Tensor) -> Tensor:
    """Mean squared difference between class scores of adjacent grid cells.

    Averages over classes, normalises by the number of adjacent pairs
    ``(N-1)M + N(M-1)``, and for a batch averages the per-image values.
    """
    if o.ndim not in (3, 4):
        raise ShapeError(f"scene_coherence_loss: expected (N, M, C) or (B, N, M, C), got {o.shape}")
    batched = o.ndim == 4
    x = o.data if batched else o.data[None]
    bsz, n, m, c = x.shape
    pairs = (n - 1) * m + n * (m - 1)
    if pairs == 0:
        raise ValueError("scene_coherence_loss: a 1x1 grid has no adjacent cells")
    dv = x[:, 1:] - x[:, :-1]
    dh = x[:, :, 1:] - x[:, :, :-1]
    norm = c * pairs * bsz
    loss = ((dv * dv).sum() + (dh * dh).sum()) / norm

    def bw(g):
        gx = np.zeros_like(x)
        k = 2.0 * g / norm
        gx[:, 1:] += k * dv
        gx[:, :-1] -= k * dv
        gx[:, :, 1:] += k * dh
        gx[:, :, :-1] -= k * dh
        return (gx if batched else gx[0],)

    return record("scene_coherence_loss", np.asarray(loss, dtype=x.dtype), (o,), bw)


def _label_indices(y, batch: Optional[int], num_classes: int) -> np.ndarray:
    if isinstance(y, Label):
        y = y.index
    elif isinstance(y, (list, tuple)) and y and isinstance(y[0], Label):
        y = [lab.index for lab in y]
    arr = np.asarray(y)
    if arr.ndim == (2 if batch else 1):
        # one-hot rows
        if arr.shape[-1] != num_classes:
            raise ShapeError(f"one-hot labels of width {arr.shape[-1]} for {num_classes} classes")
        arr = arr.argmax(axis=-1)
    idx = np.atleast_1d(arr).astype(np.int64)
    if idx.shape != ((batch or 1),):
        raise ShapeError(f"labels {np.shape(y)} do not match batch of {batch or 1}")
    return idx


def grid_cross_entropy(o: Tensor, y) -> Tensor:
    """Softmax cross-entropy of the grid-averaged scores against ``y``.

    ``y`` may be a :class:`Label`, a class index, or (for a batch) a sequence
    of indices / Labels.
    """
    _check_grid(o)
    pooled = mean(o, axis=(-3, -2))
    batch = o.shape[0] if o.ndim == 4 else None
    idx = _label_indices(y, batch, o.shape[-1])
    return softmax_cross_entropy(pooled, idx if batch else idx[0])


def objective(classification: Tensor, grid: Optional[Tensor], gamma: float) -> LossBreakdown:
    """``classification + gamma * SCL(grid)``.

    With ``gamma == 0`` the coherence term is still measured, but off the
    tape so it contributes nothing to the gradient.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if grid is None:
        ce = classification.item()
        return LossBreakdown(ce, 0.0, ce, gamma, classification)
    if gamma == 0:
        with no_grad():
            scl = scene_coherence_loss(grid)
        total = classification
    else:
        scl = scene_coherence_loss(grid)
        total = classification + mul(scl, gamma)
    return LossBreakdown(classification.item(), scl.item(), total.item(), float(gamma), total)


def total_loss(o: Tensor, y, gamma: float = 1.0) -> LossBreakdown:
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    return objective(grid_cross_entropy(o, y), o, gamma)
