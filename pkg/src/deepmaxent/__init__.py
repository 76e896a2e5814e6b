"""Multi-species spatial intensity models from presence-only data."""

__version__ = "0.1.0"

from .data import OccurrenceMatrix, PATable, SiteTable, load_occurrences, load_pa, load_sites
from .evaluation import EvalReport, auc, evaluate
from .losses import BatchLabels, LossKind
from .model import Architecture, ModelParams
from .train import TrainConfig, TrainHistory

__all__ = [
    "Architecture",
    "BatchLabels",
    "EvalReport",
    "LossKind",
    "ModelParams",
    "OccurrenceMatrix",
    "PATable",
    "SiteTable",
    "TrainConfig",
    "TrainHistory",
    "auc",
    "evaluate",
    "load_occurrences",
    "load_pa",
    "load_sites",
]
