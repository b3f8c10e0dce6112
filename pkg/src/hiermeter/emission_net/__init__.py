"""Trainable per-track emission model and its fusion across tracks."""

from .checkpoint import (CheckpointError, ChecksumError, ShapeMismatchError, load_emissions,
                         load_params, save_emissions, save_params)
from .network import (PRESETS, EmissionSequence, NetConfig, NetParams, TrackEmission,
                      forward_track, fuse_tracks, fusion_weights, init_params, training_loss)
from .training import (TrainConfig, TrainingError, TrainResult, augment, gradient_check, train,
                       validation_loss)

__all__ = [
    "CheckpointError", "ChecksumError", "EmissionSequence", "NetConfig", "NetParams", "PRESETS",
    "ShapeMismatchError", "TrackEmission", "TrainConfig", "TrainResult", "TrainingError",
    "augment", "forward_track", "fuse_tracks", "fusion_weights", "gradient_check", "init_params",
    "load_emissions", "load_params", "save_emissions", "save_params", "train", "training_loss",
    "validation_loss",
]
