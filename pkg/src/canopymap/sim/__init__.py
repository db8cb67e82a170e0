from .motion import UGVState, WHEELBASE, psd_increment, step_ugv
from .sensor import Intrinsics, NoiseModel, PointCloud, SensorRig, cast_rays, simulate_depth_frame
from .terrain import CanopyField, InvalidSpec, Obstacle, TerrainSpec, generate_canopy

__all__ = [
    "CanopyField",
    "InvalidSpec",
    "Intrinsics",
    "NoiseModel",
    "Obstacle",
    "PointCloud",
    "SensorRig",
    "TerrainSpec",
    "UGVState",
    "WHEELBASE",
    "cast_rays",
    "generate_canopy",
    "psd_increment",
    "simulate_depth_frame",
    "step_ugv",
]
