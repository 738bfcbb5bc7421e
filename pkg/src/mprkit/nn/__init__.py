"""Minimal numpy CNN engine and the 2.5D lesion classifier."""

from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    ModelState,
    NumericalError,
    TrainConfig,
    build_25d_model,
    forward,
    loss_and_grads,
    optimizer_step,
    predict,
    predict_proba,
    train,
)

__all__ = [
    "ModelState", "NumericalError", "TrainConfig", "build_25d_model", "forward", "loss_and_grads",
    "optimizer_step", "predict", "predict_proba", "train", "save_checkpoint", "load_checkpoint",
]
