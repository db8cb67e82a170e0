from .cell import (
    DEFAULT_GATE,
    MIN_VARIANCE,
    Cell,
    HeightMeasurement,
    kalman_update,
    mahalanobis_fuse,
    measurement_variance,
    measurement_variances,
)
from .grid import (
    ElevationMap,
    GridPatch,
    IngestStats,
    ingest_point_cloud,
    propagate_motion_uncertainty,
    recenter_map,
)

__all__ = [
    "DEFAULT_GATE",
    "MIN_VARIANCE",
    "Cell",
    "ElevationMap",
    "GridPatch",
    "HeightMeasurement",
    "IngestStats",
    "ingest_point_cloud",
    "kalman_update",
    "mahalanobis_fuse",
    "measurement_variance",
    "measurement_variances",
    "propagate_motion_uncertainty",
    "recenter_map",
]
