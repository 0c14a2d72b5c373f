"""Trainable regressors, optimizers and the shared training loop."""

from .checkpoint import load_checkpoint, save_checkpoint
from .mlp import DEFAULT_HIDDEN, MlpRegressor, Normalizer
from .sequence import GATED, LAGGED, PRESETS, SequenceRegressor, lagged_windows
from .train import (
    Adam,
    FreezeMask,
    FunctionModel,
    GradientDescent,
    TrainResult,
    make_optimizer,
    mse_loss,
    nse_loss,
    resolve_loss,
    train_epochs,
)

__all__ = [
    "Adam", "FreezeMask", "FunctionModel", "GATED", "GradientDescent", "LAGGED",
    "MlpRegressor", "Normalizer", "PRESETS", "DEFAULT_HIDDEN", "SequenceRegressor", "TrainResult",
    "lagged_windows", "load_checkpoint", "make_optimizer", "mse_loss", "nse_loss",
    "resolve_loss", "save_checkpoint", "train_epochs",
]
