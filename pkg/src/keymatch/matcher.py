"""The two-stage correspondence pipeline.

Stage one matches keypoints locally: a shared graph network embeds both
graphs and the row-normalized similarity of the embeddings gives the
initial soft correspondences S0.  Stage two runs a fixed number of
consensus refinements, each with its own independently parameterized
network: random colorings injected on the source side are transported to
the target through the current correspondences, both graphs distribute
them by message passing, and disagreement between the resulting
embeddings is scored by a small MLP and folded back into the
correspondence matrix.  The final matrix is a trainable weighted sum of
every intermediate matrix, row-normalized once more.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import Graph
from .nn import (
    GnnStack,
    Mlp,
    gnn_forward,
    init_mlp,
    init_stack,
    mlp_forward,
)
from .tensor import (
    Tensor,
    bmm,
    clamp_min,
    concat_rows,
    log,
    row_softmax,
    sinkhorn_normalize,
    slice_rows,
    swap_last_axes,
    weighted_sum,
)

__all__ = [
    "MatcherModel",
    "CorrespondenceState",
    "create_model",
    "local_match",
    "consensus_iteration",
    "combine",
    "forward",
    "forward_batch",
    "loss",
    "hits_at_1",
    "NORMALIZATION_MODES",
]

NORMALIZATION_MODES = ("softmax", "sinkhorn")


@dataclass
class MatcherModel:
    """All trainable state of the pipeline.

    ``gnn0`` is shared between the two graphs within the local matching
    stage; each of the ``consensus`` stacks owns its parameters.  The
    combination weights have length K + 1, one per correspondence matrix.
    """

    gnn0: GnnStack
    consensus: list[GnnStack]
    mlp: Mlp
    combine_weights: Tensor
    coloring_dim: int
    normalization: str = "softmax"

    @property
    def num_stages(self) -> int:
        return len(self.consensus)

    @property
    def node_dim(self) -> int:
        return self.gnn0.layers[0].in_dim

    @property
    def edge_dim(self) -> int:
        return self.gnn0.layers[0].edge_dim

    @property
    def hidden_dim(self) -> int:
        return self.gnn0.out_dim

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []

        def add_stack(prefix: str, stack: GnnStack) -> None:
            for i, layer in enumerate(stack.layers):
                named.append((f"{prefix}.layer{i}.root", layer.root))
                named.append((f"{prefix}.layer{i}.kernel", layer.kernel))
                named.append((f"{prefix}.layer{i}.bias", layer.bias))

        add_stack("gnn0", self.gnn0)
        for k, stack in enumerate(self.consensus, start=1):
            add_stack(f"consensus{k}", stack)
        named.append(("mlp.w1", self.mlp.w1))
        named.append(("mlp.b1", self.mlp.b1))
        named.append(("mlp.w2", self.mlp.w2))
        named.append(("mlp.b2", self.mlp.b2))
        named.append(("combine_weights", self.combine_weights))
        return named


@dataclass
class CorrespondenceState:
    """All soft correspondence matrices of one forward pass.

    ``matrices`` holds S0 through SK in order, ``combined`` the weighted
    row-normalized combination.  ``gnn_applications`` counts per-graph
    stack applications (two per stage: source and target).
    """

    matrices: list[Tensor]
    combined: Tensor
    gnn_applications: int


def create_model(
    node_dim: int,
    hidden_dim: int,
    num_stages: int,
    layers_per_stack: int,
    edge_dim: int,
    rng: np.random.Generator,
    kernel_size: int = 5,
    coloring_dim: int = 32,
    normalization: str = "softmax",
) -> MatcherModel:
    """Freshly initialized model; all stacks share hyperparameters only."""
    if normalization not in NORMALIZATION_MODES:
        raise ValueError(f"unknown normalization mode: {normalization!r}")
    if num_stages < 0:
        raise ValueError("number of consensus stages must be >= 0")
    gnn0 = init_stack(node_dim, hidden_dim, layers_per_stack, edge_dim, kernel_size, rng)
    consensus = [
        init_stack(coloring_dim, hidden_dim, layers_per_stack, edge_dim, kernel_size, rng)
        for _ in range(num_stages)
    ]
    mlp = init_mlp(hidden_dim, rng)
    w = Tensor(np.ones(num_stages + 1))
    return MatcherModel(gnn0, consensus, mlp, w, coloring_dim, normalization)


class _BatchUnion:
    """Disjoint union of every graph in a list of pairs.

    Message passing never crosses components, so one stack application
    over the union equals independent per-graph runs while amortizing
    tensor-op overhead.  Node blocks are grouped: all source graphs
    first, then all target graphs, so a uniform-size batch splits into
    stacks of matrices with two row slices.
    """

    def __init__(self, pairs: list[tuple[Graph, Graph]]):
        self.pairs = pairs
        src_off = [0]
        for g_s, _ in pairs:
            src_off.append(src_off[-1] + g_s.n)
        tgt_off = [src_off[-1]]
        for _, g_t in pairs:
            tgt_off.append(tgt_off[-1] + g_t.n)
        self.src_off = src_off
        self.tgt_off = tgt_off
        edge_blocks = [g_s.edges + src_off[i] for i, (g_s, _) in enumerate(pairs)]
        edge_blocks += [g_t.edges + tgt_off[i] for i, (_, g_t) in enumerate(pairs)]
        attr_blocks = [g_s.edge_attr for g_s, _ in pairs]
        attr_blocks += [g_t.edge_attr for _, g_t in pairs]
        n = tgt_off[-1]
        self.graph = Graph(
            n=n,
            edges=np.vstack(edge_blocks) if edge_blocks else np.zeros((0, 2), dtype=np.int64),
            x=np.zeros((n, 0)),
            edge_attr=np.vstack(attr_blocks),
        )

    def stack_features(self) -> np.ndarray:
        parts = [g_s.x for g_s, _ in self.pairs] + [g_t.x for _, g_t in self.pairs]
        return np.vstack(parts)

    def split(self, h: Tensor, i: int) -> tuple[Tensor, Tensor]:
        return (
            slice_rows(h, self.src_off[i], self.src_off[i + 1]),
            slice_rows(h, self.tgt_off[i], self.tgt_off[i + 1]),
        )


def _pair_union(g_s: Graph, g_t: Graph) -> _BatchUnion:
    cached = g_s.cache.get("pair_union")
    if cached is not None and cached[0] is g_t:
        return cached[1]
    union = _BatchUnion([(g_s, g_t)])
    g_s.cache["pair_union"] = (g_t, union)
    return union


def _normalize_initial(k0: Tensor, model: MatcherModel) -> Tensor:
    if model.normalization == "sinkhorn":
        return sinkhorn_normalize(k0)
    return row_softmax(k0)


def local_match(g_s: Graph, g_t: Graph, model: MatcherModel) -> tuple[Tensor, Tensor]:
    """Initial correspondences from embedding similarity.

    Returns the raw similarity matrix K0 = H_s H_t^T and its row
    normalization S0 (softmax by default, sinkhorn when selected).
    """
    if g_s.n > g_t.n:
        raise ValueError("source larger than target")
    union = _pair_union(g_s, g_t)
    h = gnn_forward(union.graph, Tensor(union.stack_features()), model.gnn0)
    h_s, h_t = union.split(h, 0)
    k0 = h_s @ h_t.T
    return k0, _normalize_initial(k0, model)


def consensus_iteration(
    g_s: Graph,
    g_t: Graph,
    s_prev: Tensor,
    stack: GnnStack,
    mlp: Mlp,
    rng: np.random.Generator,
) -> Tensor:
    """One refinement: inject colorings, propagate, score disagreement.

    Colorings are standard-normal, drawn fresh for the source nodes on
    every call; the target receives them through the current soft
    correspondences, so a target relabeling commutes with this step.
    """
    n_s, n_t = s_prev.shape
    union = _pair_union(g_s, g_t)
    r_s = Tensor(rng.standard_normal((n_s, stack.layers[0].in_dim)))
    r_t = s_prev.T @ r_s
    z = gnn_forward(union.graph, concat_rows([r_s, r_t]), stack)
    z_s, z_t = union.split(z, 0)
    hidden = z_s.shape[1]
    d = z_s.reshape((n_s, 1, hidden)) - z_t.reshape((1, n_t, hidden))
    scores = mlp_forward(d, mlp).reshape((n_s, n_t))
    return row_softmax(s_prev + scores)


def combine(s_list: list[Tensor], w: Tensor) -> Tensor:
    """Row-normalized weighted sum of all correspondence matrices."""
    return row_softmax(weighted_sum(s_list, w))


def forward(
    g_s: Graph,
    g_t: Graph,
    model: MatcherModel,
    rng: np.random.Generator,
) -> CorrespondenceState:
    """Full pipeline: local matching, K refinements, combination.

    Applies a stack to a graph 2 (1 + K) times in total: the shared
    stage-0 stack once per graph, then each consensus stack once per
    graph.
    """
    _, s = local_match(g_s, g_t, model)
    matrices = [s]
    for stack in model.consensus:
        s = consensus_iteration(g_s, g_t, s, stack, model.mlp, rng)
        matrices.append(s)
    combined = combine(matrices, model.combine_weights)
    applications = 2 * (1 + model.num_stages)
    return CorrespondenceState(matrices, combined, applications)


def forward_batch(
    graph_pairs: list[tuple[Graph, Graph]],
    model: MatcherModel,
    rng: np.random.Generator,
) -> list[CorrespondenceState]:
    """Run the pipeline on many pairs at once for training throughput.

    Per-pair results match :func:`forward` semantics (stage order,
    coloring distribution, normalizations); the per-stage stack runs are
    fused across the batch through one disjoint-union graph, and stage
    colorings are drawn pair by pair in list order.  Batches whose pairs
    all share one (n_s, n_t) shape additionally batch every dense step.
    """
    if not graph_pairs:
        return []
    for g_s, g_t in graph_pairs:
        if g_s.n > g_t.n:
            raise ValueError("source larger than target")
    sizes = {(g_s.n, g_t.n) for g_s, g_t in graph_pairs}
    if len(sizes) == 1 and model.normalization == "softmax" and len(graph_pairs) > 1:
        return _forward_batch_uniform(graph_pairs, model, rng)
    union = _BatchUnion(graph_pairs)
    h = gnn_forward(union.graph, Tensor(union.stack_features()), model.gnn0)
    current: list[Tensor] = []
    matrices: list[list[Tensor]] = []
    for i in range(len(graph_pairs)):
        h_s, h_t = union.split(h, i)
        s0 = _normalize_initial(h_s @ h_t.T, model)
        current.append(s0)
        matrices.append([s0])
    hidden = model.hidden_dim
    for stack in model.consensus:
        color_dim = stack.layers[0].in_dim
        colorings = [
            Tensor(rng.standard_normal((g_s.n, color_dim))) for g_s, _ in graph_pairs
        ]
        transported = [current[i].T @ r_s for i, r_s in enumerate(colorings)]
        z = gnn_forward(union.graph, concat_rows(colorings + transported), stack)
        d_flat: list[Tensor] = []
        for i, (g_s, g_t) in enumerate(graph_pairs):
            z_s, z_t = union.split(z, i)
            d = z_s.reshape((g_s.n, 1, hidden)) - z_t.reshape((1, g_t.n, hidden))
            d_flat.append(d.reshape((g_s.n * g_t.n, hidden)))
        scores_flat = mlp_forward(concat_rows(d_flat), model.mlp)
        offset = 0
        for i, (g_s, g_t) in enumerate(graph_pairs):
            block = slice_rows(scores_flat, offset, offset + g_s.n * g_t.n)
            offset += g_s.n * g_t.n
            s_k = row_softmax(current[i] + block.reshape((g_s.n, g_t.n)))
            current[i] = s_k
            matrices[i].append(s_k)
    applications = 2 * (1 + model.num_stages)
    return [
        CorrespondenceState(mats, combine(mats, model.combine_weights), applications)
        for mats in matrices
    ]


def _forward_batch_uniform(
    graph_pairs: list[tuple[Graph, Graph]],
    model: MatcherModel,
    rng: np.random.Generator,
) -> list[CorrespondenceState]:
    """Batched pipeline for pairs that all share one (n_s, n_t) shape.

    Dense per-pair steps run as stacked 3-D operations; soft matrices
    live as one (B, n_s, n_t) tensor per stage and are sliced apart only
    when assembling the returned states.
    """
    b = len(graph_pairs)
    n_s = graph_pairs[0][0].n
    n_t = graph_pairs[0][1].n
    union = _BatchUnion(graph_pairs)
    hidden = model.hidden_dim

    def softmax3(t: Tensor) -> Tensor:
        return row_softmax(t.reshape((b * n_s, n_t))).reshape((b, n_s, n_t))

    h = gnn_forward(union.graph, Tensor(union.stack_features()), model.gnn0)
    h_s = slice_rows(h, 0, b * n_s).reshape((b, n_s, hidden))
    h_t = slice_rows(h, b * n_s, union.graph.n).reshape((b, n_t, hidden))
    s = softmax3(bmm(h_s, swap_last_axes(h_t)))
    stages = [s]
    for stack in model.consensus:
        color_dim = stack.layers[0].in_dim
        r_s = Tensor(rng.standard_normal((b, n_s, color_dim)))
        r_t = bmm(swap_last_axes(s), r_s)
        colors = concat_rows(
            [r_s.reshape((b * n_s, color_dim)), r_t.reshape((b * n_t, color_dim))]
        )
        z = gnn_forward(union.graph, colors, stack)
        z_s = slice_rows(z, 0, b * n_s).reshape((b, n_s, 1, hidden))
        z_t = slice_rows(z, b * n_s, union.graph.n).reshape((b, 1, n_t, hidden))
        d = z_s - z_t
        scores = mlp_forward(d.reshape((b * n_s * n_t, hidden)), model.mlp)
        s = softmax3(s + scores.reshape((b, n_s, n_t)))
        stages.append(s)
    combined = softmax3(weighted_sum(stages, model.combine_weights))

    applications = 2 * (1 + model.num_stages)
    states = []
    flat = [stage.reshape((b * n_s, n_t)) for stage in stages]
    combined_flat = combined.reshape((b * n_s, n_t))
    for i in range(b):
        mats = [slice_rows(f, i * n_s, (i + 1) * n_s) for f in flat]
        states.append(
            CorrespondenceState(
                mats,
                slice_rows(combined_flat, i * n_s, (i + 1) * n_s),
                applications,
            )
        )
    return states


def _validate_mapping(pi, n_s: int, n_t: int) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.int64).reshape(-1)
    if pi.shape[0] != n_s:
        raise DataError(f"mapping has {pi.shape[0]} entries, expected {n_s}")
    if np.any(pi < 0) or np.any(pi >= n_t):
        raise DataError("mapping target index out of range")
    if len(np.unique(pi)) != n_s:
        raise DataError("mapping is not injective")
    return pi


def loss(s: Tensor, pi) -> Tensor:
    """Sum of negative log-probabilities of the true matches.

    Zero exactly when every true entry is 1; the log argument is clamped
    at 1e-12 so a hard zero never produces an infinite loss.
    """
    n_s, n_t = s.shape
    pi = _validate_mapping(pi, n_s, n_t)
    mask = np.zeros((n_s, n_t))
    mask[np.arange(n_s), pi] = 1.0
    picked = (s * Tensor(mask)).sum(axis=1)
    return -log(clamp_min(picked, 1e-12)).sum()


def hits_at_1(s, pi) -> float:
    """Fraction of source nodes whose row argmax is the true match.

    Ties resolve to the lowest column index.
    """
    values = s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64)
    n_s, n_t = values.shape
    pi = _validate_mapping(pi, n_s, n_t)
    return float(np.mean(values.argmax(axis=1) == pi))
