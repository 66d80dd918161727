"""From-scratch numpy CNN engine for organic/recyclable waste image classification."""

from .models import ModelConfig, build_model, count_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = ["ModelConfig", "TrainConfig", "build_model", "count_params", "evaluate",
           "load_checkpoint", "save_checkpoint", "train"]
