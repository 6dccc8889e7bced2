"""Neural building blocks: spline-kernel graph convolution, MLP, Adam.

The graph convolution weights each neighbor's message by a trainable
kernel evaluated at the edge's pseudo-coordinates through a degree-1
B-spline basis: for node i,

    out_i = relu(W h_i + sum_{(j -> i)} Phi(e_{j,i}) h_j + bias)

where Phi(u) = sum_b basis_b(u) * Kernel_b.  With kernel_size k per edge
feature dimension there are k**d kernel matrices; at most 2**d basis
weights are nonzero per edge and they always sum to 1.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .geometry import Graph
from .tensor import GradTape  # noqa: F401  (re-exported for convenience)
from .tensor import Tensor, _record, gather_rows, relu, scatter_add_rows

__all__ = [
    "SplineConvLayer",
    "GnnStack",
    "Mlp",
    "AdamState",
    "spline_basis",
    "spline_conv",
    "gnn_forward",
    "mlp_forward",
    "init_spline_conv",
    "init_stack",
    "init_mlp",
    "adam_init",
    "adam_step",
]

DEFAULT_KERNEL_SIZE = 5


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


@dataclass
class SplineConvLayer:
    """One graph convolution layer with a B-spline edge kernel (degree 1)."""

    in_dim: int
    out_dim: int
    edge_dim: int
    kernel_size: int
    root: Tensor      # (out_dim, in_dim)
    kernel: Tensor    # (kernel_size**edge_dim, out_dim, in_dim)
    bias: Tensor      # (out_dim,)
    degree: int = 1

    def parameters(self) -> list[Tensor]:
        return [self.root, self.kernel, self.bias]


@dataclass
class GnnStack:
    """A sequence of spline-conv layers applied back to back."""

    layers: list[SplineConvLayer]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


@dataclass
class Mlp:
    """Two-layer perceptron with ReLU hidden activation and scalar output."""

    w1: Tensor  # (hidden, in_dim)
    b1: Tensor  # (hidden,)
    w2: Tensor  # (1, hidden)
    b2: Tensor  # (1,)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def init_spline_conv(
    in_dim: int,
    out_dim: int,
    edge_dim: int,
    kernel_size: int,
    rng: np.random.Generator,
) -> SplineConvLayer:
    if kernel_size < 2:
        raise ValueError("kernel_size must be at least 2")
    num_basis = kernel_size**edge_dim
    root = Tensor(_glorot(rng, (out_dim, in_dim), in_dim, out_dim))
    kernel = Tensor(_glorot(rng, (num_basis, out_dim, in_dim), in_dim, out_dim))
    bias = Tensor(np.zeros(out_dim))
    return SplineConvLayer(in_dim, out_dim, edge_dim, kernel_size, root, kernel, bias)


def init_stack(
    in_dim: int,
    hidden_dim: int,
    num_layers: int,
    edge_dim: int,
    kernel_size: int,
    rng: np.random.Generator,
) -> GnnStack:
    dims = [in_dim] + [hidden_dim] * num_layers
    layers = [
        init_spline_conv(dims[i], dims[i + 1], edge_dim, kernel_size, rng)
        for i in range(num_layers)
    ]
    return GnnStack(layers)


def init_mlp(in_dim: int, rng: np.random.Generator) -> Mlp:
    return Mlp(
        w1=Tensor(_glorot(rng, (in_dim, in_dim), in_dim, in_dim)),
        b1=Tensor(np.zeros(in_dim)),
        w2=Tensor(_glorot(rng, (1, in_dim), in_dim, 1)),
        b2=Tensor(np.zeros(1)),
    )


def spline_basis(u, kernel_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Degree-1 basis indices and weights for one point in [0, 1]^d.

    Per dimension the point sits at t = u * (kernel_size - 1) between
    knots i = floor(t) (clamped to kernel_size - 2) and i + 1, with
    weights (1 - frac, frac).  Returns the 2**d tensor-product index
    tuples, shape (2**d, d), and weights, shape (2**d,), which are
    nonnegative and sum to 1; entries with zero weight are retained.
    """
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise ValueError("edge feature out of range")
    idx, wts = _basis_1d(u[None, :], kernel_size)
    d = u.shape[0]
    indices = np.zeros((2**d, d), dtype=np.int64)
    weights = np.ones(2**d)
    for dim in range(d):
        half = 2 ** (d - dim - 1)
        choice = (np.arange(2**d) // half) % 2
        indices[:, dim] = idx[0, dim, choice]
        weights *= wts[0, dim, choice]
    return indices, weights


def _basis_1d(u: np.ndarray, kernel_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Knot indices (m, d, 2) and weights (m, d, 2) per dimension."""
    t = u * (kernel_size - 1)
    i = np.minimum(np.floor(t), kernel_size - 2).astype(np.int64)
    frac = t - i
    idx = np.stack([i, i + 1], axis=-1)
    wts = np.stack([1.0 - frac, frac], axis=-1)
    return idx, wts


class _BasisPlan:
    """Edge-to-kernel assignment of one graph.

    Precomputed once per (graph, kernel_size): every edge activates the
    2**d corner basis functions around its feature point.  Corner rows
    live in two layouts: edge-major (corners of one edge contiguous, so
    the corner sum is a reshape-sum) and basis-sorted (rows grouped per
    kernel matrix, so the transform is one matmul per active matrix);
    ``order``/``inv_order`` convert between them.
    """

    def __init__(self, edge_attr: np.ndarray, kernel_size: int):
        m, d = edge_attr.shape
        if np.any(edge_attr < 0.0) or np.any(edge_attr > 1.0):
            raise ValueError("edge feature out of range")
        idx, wts = _basis_1d(edge_attr, kernel_size)
        corners = 2**d
        flat = np.zeros((m, corners), dtype=np.int64)
        weight = np.ones((m, corners))
        for dim in range(d):
            half = 2 ** (d - dim - 1)
            choice = (np.arange(corners) // half) % 2
            flat = flat * kernel_size + idx[:, dim, choice]
            weight = weight * wts[:, dim, choice]
        flat = flat.ravel()
        self.corners = corners
        self.order = np.argsort(flat, kind="stable")
        self.inv_order = np.argsort(self.order, kind="stable")
        self.rows_sorted = np.repeat(np.arange(m, dtype=np.intp), corners)[self.order]
        self.weights_sorted = weight.reshape(-1, 1)[self.order]
        sorted_flat = flat[self.order]
        bounds = np.flatnonzero(np.diff(sorted_flat)) + 1
        starts = np.concatenate([[0], bounds, [len(sorted_flat)]])
        self.segments = [
            (int(sorted_flat[starts[s]]), int(starts[s]), int(starts[s + 1]))
            for s in range(len(starts) - 1)
        ]
        self.missing_basis = np.setdiff1d(np.arange(kernel_size**d), sorted_flat)
        self.num_edges = m


def _basis_plan(g: Graph, kernel_size: int) -> _BasisPlan:
    key = ("spline_basis_plan", kernel_size)
    plan = g.cache.get(key)
    if plan is None:
        plan = _BasisPlan(g.edge_attr, kernel_size)
        g.cache[key] = plan
    return plan


_SCRATCH = threading.local()


def _scratch(name: str, shape: tuple[int, ...]) -> np.ndarray:
    """Reusable per-thread work buffer; avoids large-allocation churn."""
    buffers = getattr(_SCRATCH, "buffers", None)
    if buffers is None:
        buffers = _SCRATCH.buffers = {}
    buf = buffers.get((name, shape))
    if buf is None:
        buf = buffers[(name, shape)] = np.empty(shape)
    return buf


def _spline_message(h_src: Tensor, kernel: Tensor, plan: _BasisPlan) -> Tensor:
    """Per-edge kernel transform: msg_e = (sum_b basis_eb Kernel_b) h_e.

    Forward and backward both run one BLAS call per active kernel matrix,
    which keeps the hot path of the pipeline off the per-edge Python
    loop.  Expanded corner rows live in scratch buffers; the backward
    rebuilds its gathered inputs rather than retaining them.
    """
    hs = h_src.data
    kd = kernel.data
    m, in_dim = hs.shape
    out_dim = kd.shape[1]
    corners = plan.corners
    rows = plan.rows_sorted
    s_total = len(rows)
    hs_rep = np.take(hs, rows, axis=0, out=_scratch("hs_rep", (s_total, in_dim)))
    y = _scratch("y", (s_total, out_dim))
    for b, lo, hi in plan.segments:
        np.dot(hs_rep[lo:hi], kd[b].T, out=y[lo:hi])
    y *= plan.weights_sorted
    y_em = np.take(y, plan.inv_order, axis=0, out=_scratch("y_em", (s_total, out_dim)))
    msg = np.einsum("mco->mo", y_em.reshape(m, corners, out_dim), optimize=False)
    out = Tensor(msg)

    def grad(g_out):
        gy = np.take(g_out, rows, axis=0, out=_scratch("gy", (s_total, out_dim)))
        gy *= plan.weights_sorted
        hs_rep = np.take(hs, rows, axis=0, out=_scratch("hs_rep", (s_total, in_dim)))
        d_kernel = np.empty_like(kd)
        d_kernel[plan.missing_basis] = 0.0
        d_rep = _scratch("d_rep", (s_total, in_dim))
        for b, lo, hi in plan.segments:
            np.dot(gy[lo:hi].T, hs_rep[lo:hi], out=d_kernel[b])
            np.dot(gy[lo:hi], kd[b], out=d_rep[lo:hi])
        d_em = np.take(
            d_rep, plan.inv_order, axis=0, out=_scratch("d_em", (s_total, in_dim))
        )
        d_src = np.einsum("mci->mi", d_em.reshape(m, corners, in_dim), optimize=False)
        return d_src, d_kernel

    return _record(out, (h_src, kernel), grad)


def spline_conv(g: Graph, h: Tensor, layer: SplineConvLayer) -> Tensor:
    """One message-passing step over the directed edges of ``g``."""
    if h.shape != (g.n, layer.in_dim):
        raise ValueError(
            f"node features have shape {h.shape}, expected ({g.n}, {layer.in_dim})"
        )
    if g.num_edges and g.edge_attr.shape[1] != layer.edge_dim:
        raise ValueError(
            f"edge features have width {g.edge_attr.shape[1]}, "
            f"expected {layer.edge_dim}"
        )
    pre = h @ layer.root.T
    if g.num_edges:
        plan = _basis_plan(g, layer.kernel_size)
        h_src = gather_rows(h, g.edges[:, 0])
        msg = _spline_message(h_src, layer.kernel, plan)
        pre = pre + scatter_add_rows(msg, g.edges[:, 1], g.n)
    return relu(pre + layer.bias)


def gnn_forward(g: Graph, x: Tensor, stack: GnnStack) -> Tensor:
    """Apply the stack's layers in order to node features ``x``."""
    h = x
    for layer in stack.layers:
        h = spline_conv(g, h, layer)
    return h


def mlp_forward(x: Tensor, mlp: Mlp) -> Tensor:
    """Score every vector along the last axis; output keeps a width-1 axis."""
    in_dim = mlp.w1.shape[1]
    if x.shape[-1] != in_dim:
        raise ValueError(f"mlp expects last dim {in_dim}, got {x.shape[-1]}")
    flat = x.reshape((-1, in_dim))
    hidden = relu(flat @ mlp.w1.T + mlp.b1)
    scores = hidden @ mlp.w2.T + mlp.b2
    return scores.reshape(x.shape[:-1] + (1,))


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: list[Tensor]) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """Standard bias-corrected Adam update, applied in place."""
    if len(params) != len(grads):
        raise ValueError("length mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
