"""Unsupervised multi-object tracking with a spatially invariant video VAE."""
from .core import (ConfigurationError, LatentRecord, ModelConfig, NumericFault, ObjectSet,
                   PriorConfig, Track, TrainSchedule, VideoSample,
                   concat_object_sets, empty_object_set)
from .model import RolloutTrace, Silot

__version__ = "0.1.0"
