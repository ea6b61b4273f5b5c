"""Classical momentum SGD."""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..tensor import NonFiniteError, Tensor


def sgd_momentum_step(params: dict[str, Tensor], grads: Optional[dict[str, np.ndarray]],
                      state: dict[str, np.ndarray], lr: float, momentum: float) -> None:
    """``v <- momentum*v + g``; ``p <- p - lr*v``, in place.

    ``grads`` defaults to each parameter's ``.grad``.  All gradients are
    checked before any parameter moves.
    """
    gs = {}
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise KeyError(f"no gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter is {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        gs[name] = g
    for name, p in params.items():
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + gs[name]
        state[name] = v
        p.data -= (lr * v).astype(p.data.dtype, copy=False)
