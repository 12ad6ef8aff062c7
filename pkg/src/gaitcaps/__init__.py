"""Gait recognition with partial features, a bi-directional GRU and capsules."""
from .config import TrainConfig
from .data import DatasetIndex, GaitSequence, load_dataset, preprocess_frame, synth_dataset
from .training import Checkpoint, load_checkpoint, save_checkpoint, train_full

__all__ = [
    "Checkpoint",
    "DatasetIndex",
    "GaitSequence",
    "TrainConfig",
    "load_checkpoint",
    "load_dataset",
    "preprocess_frame",
    "save_checkpoint",
    "synth_dataset",
    "train_full",
]
__version__ = "0.1.0"
