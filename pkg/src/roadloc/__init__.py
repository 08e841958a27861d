"""Coarse-to-fine vehicle localization on a synthetic road world.

Triplet-trained compact descriptors give coarse position fixes near a GPS
prior; Ackermann ego-motion and an extended Kalman filter fuse them into a
high-rate location stream.
"""

__version__ = "0.1.0"

from .geoworld import GeoPose, GpsNoiseModel, WorldConfig, generate_world, simulate_ride  # noqa: E402
from .embedding import EmbeddingModel, TrainSchedule, embed, train  # noqa: E402
from .retrieval import KeyframeDB, build_index, calibrate_threshold, coarse_localize, gps_nn_baseline  # noqa: E402
from .egomotion import MotionStep, propagate, motion_loss  # noqa: E402
from .fusion import FilterState, predict, run_fusion, update  # noqa: E402

__all__ = [
    "EmbeddingModel",
    "FilterState",
    "GeoPose",
    "GpsNoiseModel",
    "KeyframeDB",
    "MotionStep",
    "TrainSchedule",
    "WorldConfig",
    "build_index",
    "calibrate_threshold",
    "coarse_localize",
    "embed",
    "generate_world",
    "gps_nn_baseline",
    "motion_loss",
    "predict",
    "propagate",
    "run_fusion",
    "simulate_ride",
    "train",
    "update",
]
