"""Learn which modules feed which, together with the weights, in residual and multi-branch networks."""

from .connectivity import MaskState, PruneReport, freeze_topk, prune_unused, sample_binary, update_masks
from .data import Dataset, augment, load_cifar, make_blobs, make_synthetic
from .errors import (
    AdapterError,
    CifarFormatError,
    ConfigError,
    ContractViolation,
    DegenerateBatchError,
    ModconnError,
    NumericError,
    ShapeError,
)
from .estimator import ConnectivityClassifier
from .graph import ArchSpec, ModuleGraph, build_graph, build_resnet_masked, build_resnext_masked, graph_backward, graph_forward
from .train import Phase, PhaseSchedule, TrainConfig, evaluate, run_phases

__version__ = "0.1.0"

__all__ = [
    "AdapterError", "ArchSpec", "CifarFormatError", "ConfigError", "ContractViolation", "Dataset",
    "DegenerateBatchError", "ConnectivityClassifier", "MaskState", "ModconnError", "ModuleGraph",
    "NumericError", "Phase", "PhaseSchedule", "PruneReport", "ShapeError", "TrainConfig", "augment",
    "build_graph", "build_resnet_masked", "build_resnext_masked", "evaluate", "freeze_topk",
    "graph_backward", "graph_forward", "load_cifar", "make_blobs", "make_synthetic", "prune_unused",
    "run_phases", "sample_binary", "update_masks",
]
