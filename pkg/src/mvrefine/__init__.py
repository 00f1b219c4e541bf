"""Hybrid iterative multi-view 3D pose refinement on a synthetic benchmark.

Learnable per-view 2D refinement plus learning-free confidence-weighted
triangulation, repeated over decoder layers, trained end to end with
hand-written reverse-mode gradients.
"""

__version__ = "0.1.0"

from .camgeom import (ArrangementSpec, CameraModel, GroundPlaneSpec,
                      load_calibration, make_arrangement, project, save_calibration)
from .errors import MvRefineError
from .querydecoder import (CompositionalQuery, DecoderConfig, FeatureMapSet,
                           ModelParams, decode, init_queries, nms)
from .scenesim import DatasetConfig, OcclusionConfig, Scene, generate_dataset, load_dataset
from .trainer import TrainConfig, train
from .triangulation import TriangulationResult, ViewObservation, triangulate, triangulate_vjp

__all__ = [
    "ArrangementSpec", "CameraModel", "GroundPlaneSpec", "load_calibration",
    "make_arrangement", "project", "save_calibration", "MvRefineError",
    "CompositionalQuery", "DecoderConfig", "FeatureMapSet", "ModelParams",
    "decode", "init_queries", "nms", "DatasetConfig", "OcclusionConfig", "Scene",
    "generate_dataset", "load_dataset", "TrainConfig", "train",
    "TriangulationResult", "ViewObservation", "triangulate", "triangulate_vjp",
    "__version__",
]
