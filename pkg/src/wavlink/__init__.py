"""Desk-scale audio-text dual encoder with a learnable global pooling token."""

from .config import ModelConfig, SyntheticDatasetSpec, TrainConfig
from .towers import DualEncoder, build_model

__all__ = ["DualEncoder", "ModelConfig", "SyntheticDatasetSpec", "TrainConfig", "build_model"]
__version__ = "0.1.0"
