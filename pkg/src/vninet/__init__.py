"""Rotation-invariant LiDAR place-recognition descriptors built from
vector-neuron layers."""

from .core_math import KnnGraph, apply_rotation, knn, normalize_cloud, sample_rotation
from .data import (DatasetIndex, DescriptorDB, FrameRecord, SyntheticConfig, gen_synthetic,
                   load_db, load_frame, load_index, positives_negatives, save_db, save_frame)
from .errors import FormatError, ValidationError
from .model import (ModelConfig, VNINet, forward, gem_pool, init_params, load_checkpoint,
                    param_count, param_report, save_checkpoint)

__all__ = [
    "KnnGraph", "apply_rotation", "knn", "normalize_cloud", "sample_rotation",
    "DatasetIndex", "DescriptorDB", "FrameRecord", "SyntheticConfig", "gen_synthetic",
    "load_db", "load_frame", "load_index", "positives_negatives", "save_db", "save_frame",
    "FormatError", "ValidationError",
    "ModelConfig", "VNINet", "forward", "gem_pool", "init_params", "load_checkpoint",
    "param_count", "param_report", "save_checkpoint",
]
