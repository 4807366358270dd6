"""Desk-scale hybrid CNN-Transformer multi-task affect model on a numpy autodiff core."""

from .autodiff import DomainError, Tape, Tensor, backward, gradcheck
from .config import RunConfig
from .losses import MetricsReport, ccc, ccc_loss, combined_loss, compute_au_weights, cross_entropy, weighted_bce
from .model import HybridModel, ModelConfig, build_model, ensemble, predict, predict_set
from .train import StagePlan, TrainConfig, TrainState, load_checkpoint, run_stage, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "DomainError", "Tape", "Tensor", "backward", "gradcheck", "RunConfig", "MetricsReport", "ccc", "ccc_loss",
    "combined_loss", "compute_au_weights", "cross_entropy", "weighted_bce", "HybridModel", "ModelConfig",
    "build_model", "ensemble", "predict", "predict_set", "StagePlan", "TrainConfig", "TrainState",
    "load_checkpoint", "run_stage", "save_checkpoint",
]
