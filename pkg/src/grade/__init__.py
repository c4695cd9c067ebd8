"""Dynamic graph generative model with evolving communities, trained by
structured amortized variational inference."""
from .dyngraph import DynamicGraph, Snapshot, TemporalSplit, split_temporal
from .inference import GradeModel, TrainConfig, project_future, train, train_state
from .protocol import evaluate

__version__ = "0.1.0"

__all__ = ["DynamicGraph", "GradeModel", "Snapshot", "TemporalSplit", "TrainConfig", "evaluate",
           "project_future", "split_temporal", "train", "train_state"]
