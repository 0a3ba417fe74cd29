"""Latent environment and rationale inference for out-of-distribution graph classification."""

from .errors import (
    ConfigError,
    DataError,
    DerogError,
    DimensionError,
    IncompatibleCheckpointError,
    NumericError,
    ParseError,
    UndefinedMetricError,
    UsageError,
    ValidationError,
)
from .graph import Batch, DatasetSplit, Graph, MotifConfig, batch_graphs, generate_motif_dataset
from .model import DerogParams, Dims, ErmParams, LatentState, forward_full, infer_latents
from .objective import LossWeights
from .tensor import Tape, Tensor, backward, finite_difference_gradcheck
from .trainer import AblationFlags, Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AblationFlags", "Batch", "Checkpoint", "ConfigError", "DataError", "DatasetSplit", "DerogError",
    "DerogParams", "Dims", "DimensionError", "ErmParams", "Graph", "IncompatibleCheckpointError",
    "LatentState", "LossWeights", "MotifConfig", "NumericError", "ParseError", "Tape", "Tensor",
    "TrainConfig", "UndefinedMetricError", "UsageError", "ValidationError", "backward", "batch_graphs",
    "evaluate", "finite_difference_gradcheck", "forward_full", "generate_motif_dataset", "infer_latents",
    "load_checkpoint", "save_checkpoint", "train",
]
