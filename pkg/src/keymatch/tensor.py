"""Dense float64 tensors with a minimal reverse-mode gradient tape.

Every numeric quantity in the matching pipeline lives in a :class:`Tensor`,
a thin wrapper around a row-major ``numpy`` float64 array.  Operations
executed while a :class:`GradTape` is active are recorded, and
:func:`backward` replays the record in reverse to accumulate gradients for
the watched parameters.

Tensors are treated as immutable values once produced; the optimizer is the
only place that rebinds parameter data, and it does so between passes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "tensor",
    "add",
    "subtract",
    "multiply",
    "divide",
    "matmul",
    "bmm",
    "swap_last_axes",
    "transpose",
    "reshape",
    "relu",
    "exp",
    "log",
    "clamp_min",
    "tensor_sum",
    "row_softmax",
    "sinkhorn_normalize",
    "gather_rows",
    "scatter_add_rows",
    "concat_rows",
    "slice_rows",
    "weighted_sum",
]


class Tensor:
    """A dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        return multiply(self, _as_tensor(other))

    def __rmul__(self, other):
        return multiply(_as_tensor(other), self)

    def __truediv__(self, other):
        return divide(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return divide(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return multiply(self, _as_tensor(-1.0))

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a Tensor from any array-like."""
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# A gradient function maps the output gradient to one gradient per input,
# already reduced to each input's exact shape (None for skipped inputs).
_GradFn = Callable[[np.ndarray], tuple]

_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Ordered record of primitive operations for reverse accumulation.

    Use as a context manager around a forward pass; operations touching a
    tensor with ``requires_grad`` are appended in execution order, which is
    a topological order of the computation.  A tape is confined to a single
    forward/backward pass and is not shared between threads.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], _GradFn]] = []
        self._watched: list[Tensor] = []

    def watch(self, *tensors: Tensor) -> None:
        """Register parameters whose gradients backward() must report."""
        for t in tensors:
            t.requires_grad = True
            self._watched.append(t)

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)


def _record(out: Tensor, inputs: tuple[Tensor, ...], grad_fn: _GradFn) -> Tensor:
    if _TAPE_STACK:
        tape = _TAPE_STACK[-1]
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            tape._records.append((out, inputs, grad_fn))
    return out


def backward(loss: Tensor, tape: GradTape) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate d(loss)/d(param) for every watched parameter.

    Each recorded operation is visited exactly once, in reverse order of
    recording.  Watched parameters that do not influence the loss receive
    an exact zero gradient.
    """
    if loss.ndim != 0:
        raise ValueError("backward requires a scalar loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for out, inputs, grad_fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, grad_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in tape._watched}


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over broadcast dimensions back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    asha, bsha = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, asha), _unbroadcast(g, bsha)))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    asha, bsha = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, asha), _unbroadcast(-g, bsha)))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def grad(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), grad)


def divide(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data

    def grad(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return _record(out, (a, b), grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product of stacks of matrices, (B,m,k) @ (B,k,n)."""
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError("bmm expects 3-D operands")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def grad(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _record(out, (a, b), grad)


def swap_last_axes(a: Tensor) -> Tensor:
    """Transpose the trailing two axes of a stack of matrices."""
    if a.ndim < 2:
        raise ValueError("swap_last_axes expects at least 2 dimensions")
    out = Tensor(np.ascontiguousarray(a.data.swapaxes(-1, -2)))
    return _record(out, (a,), lambda g: (g.swapaxes(-1, -2),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    out = Tensor(a.data.T.copy())
    return _record(out, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    asha = a.shape
    return _record(out, (a,), lambda g: (g.reshape(asha),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0
    return _record(out, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * od,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    ad = a.data
    return _record(out, (a,), lambda g: (g / ad,))


def clamp_min(a: Tensor, minimum: float) -> Tensor:
    out = Tensor(np.maximum(a.data, minimum))
    mask = a.data > minimum
    return _record(out, (a,), lambda g: (g * mask,))


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    asha = a.shape

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g, asha),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, asha),)

    return _record(out, (a,), grad)


def row_softmax(m: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D matrix, stabilized by per-row max shift."""
    if m.ndim != 2 or m.size == 0:
        raise ValueError("empty input" if m.size == 0 else "row_softmax expects a 2-D matrix")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)

    def grad(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        return ((g - inner) * s,)

    return _record(out, (m,), grad)


def sinkhorn_normalize(k: Tensor, max_iters: int = 20, tol: float = 1e-6) -> Tensor:
    """Rectangular Sinkhorn normalization of ``exp(k)``.

    Alternates a column step that divides each column by ``max(1, column
    sum)`` with a row step that divides each row by its sum, so at return
    every row sums to 1 and column sums stay at or below 1 (up to ``tol``).
    For square inputs the fixed point is doubly stochastic.  Built from
    recorded primitives, so gradients flow through the unrolled iterations.
    """
    if k.ndim != 2 or k.size == 0:
        raise ValueError("empty input" if k.size == 0 else "sinkhorn expects a 2-D matrix")
    n_s, n_t = k.shape
    if n_s > n_t:
        raise ValueError("source larger than target")
    if not np.all(np.isfinite(k.data)):
        raise ValueError("sinkhorn input must be finite")
    # Global max shift keeps exp() in range; it cancels in the row step.
    t = exp(k - float(k.data.max()))
    for _ in range(max_iters):
        col = tensor_sum(t, axis=0, keepdims=True)
        t = divide(t, clamp_min(col, 1.0))
        row = tensor_sum(t, axis=1, keepdims=True)
        if np.any(row.data == 0.0):
            raise ValueError("sinkhorn underflow: input dynamic range too large")
        t = divide(t, row)
        # Rows are exact after the row step; only column overshoot remains.
        if float(np.max(t.data.sum(axis=0)) - 1.0) < tol:
            break
    return t


def _scatter_rows(index: np.ndarray, values: np.ndarray, num_rows: int) -> np.ndarray:
    """Row-wise scatter-add via sorted segment reduction (np.add.at is slow)."""
    out = np.zeros((num_rows, values.shape[1]), dtype=np.float64)
    if len(index) == 0:
        return out
    diffs = np.diff(index)
    if np.all(diffs >= 0):
        sorted_idx = index
    else:
        order = np.argsort(index, kind="stable")
        sorted_idx = index[order]
        values = values[order]
        diffs = np.diff(sorted_idx)
    starts = np.flatnonzero(np.r_[True, diffs > 0])
    out[sorted_idx[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor by integer index (with repetition)."""
    idx = np.asarray(index, dtype=np.intp)
    out = Tensor(a.data[idx])
    n = a.shape[0]
    return _record(out, (a,), lambda g: (_scatter_rows(idx, g, n),))


def scatter_add_rows(a: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
    """Sum rows of a 2-D tensor into ``num_rows`` bins given by ``index``."""
    idx = np.asarray(index, dtype=np.intp)
    out = Tensor(_scatter_rows(idx, a.data, num_rows))
    return _record(out, (a,), lambda g: (g[idx],))


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors of equal width vertically."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("empty input")
    if any(t.ndim != 2 or t.shape[1] != tensors[0].shape[1] for t in tensors):
        raise ValueError("concat_rows expects 2-D tensors of equal width")
    out = Tensor(np.vstack([t.data for t in tensors]))
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def grad(g):
        return tuple(g[offsets[i]: offsets[i + 1]] for i in range(len(tensors)))

    return _record(out, tuple(tensors), grad)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous row slice [lo, hi) of a 2-D tensor."""
    if a.ndim != 2:
        raise ValueError("slice_rows expects a 2-D tensor")
    out = Tensor(a.data[lo:hi].copy())
    asha = a.shape

    def grad(g):
        z = np.zeros(asha, dtype=np.float64)
        z[lo:hi] = g
        return (z,)

    return _record(out, (a,), grad)


def weighted_sum(tensors: Sequence[Tensor], w: Tensor) -> Tensor:
    """Linear combination ``sum_k w[k] * tensors[k]`` with gradient to all."""
    if w.ndim != 1 or len(tensors) != w.shape[0]:
        raise ValueError("length mismatch")
    stack = np.stack([t.data for t in tensors])
    out = Tensor(np.tensordot(w.data, stack, axes=1))
    wd = w.data

    def grad(g):
        dts = tuple(wd[i] * g for i in range(len(tensors)))
        dw = np.array([float((g * stack[i]).sum()) for i in range(len(tensors))])
        return dts + (dw,)

    return _record(out, tuple(tensors) + (w,), grad)
