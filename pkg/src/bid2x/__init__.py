"""Bid2X: a bidding-environment model over heterogeneous campaign records."""

from .model import Bid2X, ModelConfig
from .training import TrainConfig, finetune, load_checkpoint, save_checkpoint, train

__all__ = ["Bid2X", "ModelConfig", "TrainConfig", "finetune", "load_checkpoint", "save_checkpoint", "train"]
