"""Hypergraph convolution with learnable, task-adapted hypergraph Laplacians."""

__version__ = "0.1.0"

from .hypergraph import Hypergraph, degrees, from_simple_graph, laplacian, normalized_operator  # noqa: E402
from .herald import HeraldParams, MixSchedule, herald_forward, mix_coefficient  # noqa: E402
from .model import HGNN, LayerSpec, ModelConfig  # noqa: E402
from .training import TrainConfig, TrainReport, cross_validate, train  # noqa: E402

__all__ = [
    "HGNN",
    "HeraldParams",
    "Hypergraph",
    "LayerSpec",
    "MixSchedule",
    "ModelConfig",
    "TrainConfig",
    "TrainReport",
    "cross_validate",
    "degrees",
    "from_simple_graph",
    "herald_forward",
    "laplacian",
    "mix_coefficient",
    "normalized_operator",
    "train",
]
