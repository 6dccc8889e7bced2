"""Keypoint graph matching with iterative neighborhood consensus.

Build graphs from 2-D keypoints (Delaunay edges, geometric edge
features), match them with a two-stage pipeline (local embedding
similarity, then consensus refinement through independently
parameterized message-passing stacks), train end-to-end with Adam on a
negative log-likelihood over the true matches, and score with Hits@1.
"""

from .errors import DataError, NumericalError
from .geometry import Graph, Keypoint, build_graph, delaunay
from .matcher import (
    CorrespondenceState,
    MatcherModel,
    combine,
    consensus_iteration,
    create_model,
    forward,
    hits_at_1,
    local_match,
    loss,
)
from .data import (
    PairSample,
    SynthConfig,
    convert_labeled_csv,
    load_checkpoint,
    load_pairs,
    pair_graphs,
    save_checkpoint,
    save_pairs,
    synth_pair,
    synth_pairs,
)
from .nn import GnnStack, Mlp, SplineConvLayer, adam_init, adam_step, gnn_forward
from .tensor import GradTape, Tensor, backward, row_softmax, sinkhorn_normalize
from .training import EvalReport, TrainConfig, evaluate, train_model

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "NumericalError",
    "Graph",
    "Keypoint",
    "build_graph",
    "delaunay",
    "CorrespondenceState",
    "MatcherModel",
    "combine",
    "consensus_iteration",
    "create_model",
    "forward",
    "hits_at_1",
    "local_match",
    "loss",
    "PairSample",
    "SynthConfig",
    "convert_labeled_csv",
    "load_checkpoint",
    "load_pairs",
    "pair_graphs",
    "save_checkpoint",
    "save_pairs",
    "synth_pair",
    "synth_pairs",
    "GnnStack",
    "Mlp",
    "SplineConvLayer",
    "adam_init",
    "adam_step",
    "gnn_forward",
    "GradTape",
    "Tensor",
    "backward",
    "row_softmax",
    "sinkhorn_normalize",
    "EvalReport",
    "TrainConfig",
    "evaluate",
    "train_model",
    "__version__",
]
