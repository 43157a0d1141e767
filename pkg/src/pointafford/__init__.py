"""Instruction-conditioned per-point affordance maps for object point clouds."""

__version__ = "0.1.0"

from .cloud import PointCloud, farthest_point_sample, knn_group, make_partial_view, normalize_unit_sphere
from .encoder import EncoderConfig, GeometricEncoder
from .model import AffordanceModel
from .train import SplitSpec, TrainConfig, infer, make_splits, train

__all__ = [
    "AffordanceModel",
    "EncoderConfig",
    "GeometricEncoder",
    "PointCloud",
    "SplitSpec",
    "TrainConfig",
    "farthest_point_sample",
    "infer",
    "knn_group",
    "make_partial_view",
    "make_splits",
    "normalize_unit_sphere",
    "train",
]
