"""Hierarchical situational graphs: keyframes, wall planes, rooms and floors in one optimizable graph."""

from .geometry import Plane, PlaneMinimal, Pose3, classify_plane
from .graph import FactorKind, NodeKind, SituationalGraph, SolverOptions
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "Plane",
    "PlaneMinimal",
    "Pose3",
    "classify_plane",
    "FactorKind",
    "NodeKind",
    "SituationalGraph",
    "SolverOptions",
    "PipelineConfig",
    "run_pipeline",
]
