"""Synthetic-event guided low-light video enhancement, desk scale."""

from .networks import ModelConfig
from .training import TrainConfig

__all__ = ["ModelConfig", "TrainConfig"]
__version__ = "0.1.0"
