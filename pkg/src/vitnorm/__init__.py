"""Vision Transformer LayerNorm-placement laboratory, including stems normalized on both sides of the patch embedding."""

from .model import ModelConfig, init_params, placement_grid, vit_forward
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = ["ModelConfig", "TrainConfig", "init_params", "placement_grid", "vit_forward", "train", "evaluate"]
