"""Probabilistic robot-centric elevation mapping of crop canopies, with a field simulator."""

from .fusion import FusedMap, align_local_to_global, apply_alignment, fuse_map, surface_features
from .geometry import FrameTree, Pose, Rotation
from .mapping import ElevationMap, ingest_point_cloud, propagate_motion_uncertainty, recenter_map
from .runner import eval_run, export_map, run_scenario, simulate
from .scenario import Scenario, SchemaError, bundled_scenario, load_scenario

__version__ = "0.1.0"

__all__ = [
    "ElevationMap",
    "FrameTree",
    "FusedMap",
    "Pose",
    "Rotation",
    "Scenario",
    "SchemaError",
    "align_local_to_global",
    "apply_alignment",
    "bundled_scenario",
    "eval_run",
    "export_map",
    "fuse_map",
    "ingest_point_cloud",
    "load_scenario",
    "propagate_motion_uncertainty",
    "recenter_map",
    "run_scenario",
    "simulate",
    "surface_features",
]
