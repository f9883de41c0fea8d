"""Capsule-network spoken language understanding from small amounts of data."""

from .model import ModelConfig, SlotGroup, SlotSpec, count_params
from .trainer import TrainConfig

__all__ = ["ModelConfig", "SlotGroup", "SlotSpec", "TrainConfig", "count_params"]
__version__ = "0.1.0"
