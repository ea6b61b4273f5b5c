"""Dense tensors with define-by-run reverse-mode differentiation.

Every primitive records one node on the active :class:`Tape`.  A tape lives
for a single forward pass: :func:`backward` replays it in reverse and then
clears it.  Values are numpy arrays (float64 by default, float32 on request).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

DEFAULT_DTYPE = np.float64
_ALLOWED_DTYPES = (np.dtype(np.float64), np.dtype(np.float32))


class ShapeError(ValueError):
    """A primitive received operands of incompatible shape."""


class NonFiniteError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


class TapeError(RuntimeError):
    pass


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in _ALLOWED_DTYPES else DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in _ALLOWED_DTYPES:
        raise TypeError(f"unsupported dtype {dtype}; use float64 or float32")
    # ascontiguousarray would promote 0-d arrays to shape (1,)
    return np.asarray(arr, dtype=dtype, order="C")


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: str = ""):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    # basic properties
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operators
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "tape")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward_fn: Callable, tape: "Tape"):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Append-only record of the primitives applied during one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes = []

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().stack.pop()


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = [Tape()]
        self.grad_enabled = True


_STATE = _State()


def _state() -> _State:
    return _STATE


def active_tape() -> Tape:
    return _state().stack[-1]


@contextmanager
def no_grad():
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str, stage: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in {stage} pass")


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` as a Tensor and, if needed, record it on the active tape.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    _check_finite(out_data, op, "forward")
    needs = _state().grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        tape = active_tape()
        node = Node(op, tuple(inputs), out, backward_fn, tape)
        out._node = node
        tape.record(node)
    return out


def forward(fn: Callable[..., Tensor], *inputs: Tensor) -> tuple[Tensor, Tape]:
    """Evaluate ``fn(*inputs)`` on a fresh tape; returns ``(output, tape)``."""
    with Tape() as tape:
        out = fn(*inputs)
    return out, tape


def backward(output: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``output``."""
    if output.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    node = output._node
    if node is None:
        raise TapeError("output is not on a tape (empty tape or no input requires grad)")
    tape = node.tape

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: dict[int, Tensor] = {}
    for nd in reversed(tape.nodes):
        g = grads.pop(id(nd.output), None)
        if g is None:
            continue
        in_grads = nd.backward_fn(g)
        for inp, gi in zip(nd.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(f"{nd.op}: gradient shape {gi.shape} != input shape {inp.shape}")
            _check_finite(gi, nd.op, "backward")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.is_leaf:
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = grads[key].astype(leaf.dtype, copy=False)
    tape.clear()


# ----------------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------------


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if a.size == 1 and a.ndim <= 1:
        return sb
    if b.size == 1 and b.ndim <= 1:
        return sa
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: cannot broadcast shapes {sa} and {sb} (only trailing-axis broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("add", a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("mul", a, b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == 0 or b.ndim == 0 or b.ndim > 2:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    if b.ndim == 1:
        if a.ndim == 1:
            def bw(g):
                return g * b.data, g * a.data
        elif a.ndim == 2:
            def bw(g):
                return np.outer(g, b.data), a.data.T @ g
        else:
            raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    else:
        k, n = b.shape

        def bw(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    return record("matmul", out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got {a.shape}")
    return record("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return record("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g / count, axes), a.shape).copy(),)

    return record("mean", np.asarray(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (B, C) or (C,) against integer labels."""
    z = logits.data
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ShapeError(f"softmax_cross_entropy: label out of range for {z.shape[1]} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    bsz = z.shape[0]
    loss = -logp[np.arange(bsz), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(bsz), labels] -= 1.0
        grad = g * p / bsz
        return (grad[0] if squeeze else grad,)

    return record("softmax_cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), bw)


def sigmoid_binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean elementwise binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"sigmoid_binary_cross_entropy: logits {logits.shape} vs targets {t.shape}")
    x = logits.data
    loss = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean()

    def bw(g):
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * (s - t) / x.size,)

    return record("sigmoid_binary_cross_entropy", np.asarray(loss, dtype=x.dtype), (logits,), bw)


# ----------------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------------


def finite_diff_check(f: Callable[..., Tensor], x, eps: float = 1e-5) -> float:
    """Compare analytic gradients of scalar ``f`` against central differences.

    ``x`` is a Tensor or a sequence of Tensors passed positionally to ``f``.
    Returns max over all components of |analytic - numeric| / max(1, |analytic|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with Tape():
        out = f(*xs)
        if out.size != 1:
            raise TapeError(f"finite_diff_check: f must return a scalar, got {out.shape}")
        if out._node is None:
            analytic = [np.zeros_like(t.data) for t in xs]
        else:
            backward(out)
            analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]

    worst = 0.0
    with no_grad():
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*xs).item()
                flat[i] = orig - eps
                fm = f(*xs).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"finite_diff_check: f is non-finite near component {i}")
                num = (fp - fm) / (2 * eps)
                err = abs(a_flat[i] - num) / max(1.0, abs(a_flat[i]))
                worst = max(worst, err)
    return float(worst)
