"""Multimodal (face / body / text) emotion classifier toolkit.

Staged feature-level fusion with channel attention and a learned
per-modality gate, built on a small reverse-mode autodiff engine, with
training, evaluation metrics, synthetic datasets, a CLI, and an HTTP
prediction service.
"""

from .autodiff import GradCheckReport, Tensor, backward, finite_diff_gradcheck
from .data import Dataset, FeatureRecord, embed_text_demo, gen_blobs, gen_shares, load_jsonl, save_jsonl, split
from .errors import (
    CheckpointError,
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigError,
    DimensionError,
    EmofuseError,
    GraphError,
    InputError,
    NumericError,
)
from .metrics import ConfusionMatrix, EvalReport, confusion, full_report, prf_accuracy, roc_auc
from .model import CANONICAL_ORDER, FafModel, Modality, ModelConfig, canonical_key
from .training import AdamState, TrainConfig, TrainHistory, adam_step, cross_entropy, loss_declining, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "CANONICAL_ORDER",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointShapeError",
    "CheckpointVersionError",
    "ConfigError",
    "ConfusionMatrix",
    "Dataset",
    "DimensionError",
    "EmofuseError",
    "EvalReport",
    "FafModel",
    "FeatureRecord",
    "GradCheckReport",
    "GraphError",
    "InputError",
    "Modality",
    "ModelConfig",
    "NumericError",
    "Tensor",
    "TrainConfig",
    "TrainHistory",
    "adam_step",
    "backward",
    "canonical_key",
    "confusion",
    "cross_entropy",
    "embed_text_demo",
    "finite_diff_gradcheck",
    "full_report",
    "gen_blobs",
    "gen_shares",
    "load_jsonl",
    "loss_declining",
    "prf_accuracy",
    "roc_auc",
    "save_jsonl",
    "split",
    "train",
]
