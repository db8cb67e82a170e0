"""Depth-camera rig and frame simulation.

Camera optical frame: x right, y down, z forward (depth axis).  A ray through
pixel (u, v) has direction ``((u - cx) / fx, (v - cy) / fy, 1)`` so the ray
parameter equals the reported depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ..geometry import Pose, Rotation

# Nadir mount: optical z -> base -z, optical x -> base -y, optical y -> base -x
NADIR = Rotation.from_matrix(np.array([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]]))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole model; defaults approximate an 848x480 RealSense D457 depth stream."""

    fx: float = 430.0
    fy: float = 430.0
    cx: float = 424.0
    cy: float = 240.0
    width: int = 848
    height: int = 480


@dataclass(frozen=True)
class NoiseModel:
    """Depth sensor noise plus the IMU densities driving pose drift.

    Depth stdev grows quadratically with range: ``sigma_z(z) = a + b z^2``.
    ``lateral`` is an angular stdev (rad); the metric lateral stdev is
    ``lateral * z``.  ``perturb=False`` keeps the declared covariances but
    returns exact points.
    """

    depth_a: float = 0.001
    depth_b: float = 0.0019
    lateral: float = 0.001
    acc_n: float = 0.04
    gyr_n: float = 0.004
    acc_w: float = 0.002
    gyr_w: float = 4.0e-5
    g_norm: float = 9.805
    perturb: bool = True

    def __post_init__(self):
        for name in ("depth_a", "depth_b", "lateral", "acc_n", "gyr_n", "acc_w", "gyr_w"):
            if getattr(self, name) < 0:
                raise ValueError(f"noise coefficient {name} must be >= 0")

    def sigma_z(self, z):
        return self.depth_a + self.depth_b * np.square(z)

    @classmethod
    def noiseless(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SensorRig:
    """Cameras on the angle-adjustable stents, poses given in the base frame."""

    mounts: dict = field(default_factory=dict)
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    stride: int = 8
    max_range: float = 4.0
    tilt: float = math.radians(30.0)

    def __post_init__(self):
        if not 0.0 <= self.tilt <= 0.5 * math.pi:
            raise ValueError("tilt must lie in [0, pi/2]")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @classmethod
    def three_camera(
        cls,
        height: float = 1.8,
        spacing: float = 0.75,
        tilt: float = math.radians(30.0),
        **kwargs,
    ) -> "SensorRig":
        """One nadir camera on the centreline and two outward-tilted side cameras."""
        if not 0.0 <= tilt <= 0.5 * math.pi:
            raise ValueError("tilt must lie in [0, pi/2]")
        ex = np.array([1.0, 0.0, 0.0])
        mounts = {
            "nadir": Pose(np.array([0.0, 0.0, height]), NADIR),
            "left": Pose(np.array([0.0, spacing, height]), Rotation.from_axis_angle(ex, tilt) @ NADIR),
            "right": Pose(np.array([0.0, -spacing, height]), Rotation.from_axis_angle(ex, -tilt) @ NADIR),
        }
        return cls(mounts=mounts, tilt=tilt, **kwargs)

    def pixel_rays(self) -> np.ndarray:
        """(N, 3) optical-frame ray directions with unit z, one per sampled pixel."""
        k = self.intrinsics
        us = np.arange(self.stride // 2, k.width, self.stride, dtype=float)
        vs = np.arange(self.stride // 2, k.height, self.stride, dtype=float)
        uu, vv = np.meshgrid(us, vs, indexing="xy")
        rays = np.empty((uu.size, 3))
        rays[:, 0] = ((uu - k.cx) / k.fx).ravel()
        rays[:, 1] = ((vv - k.cy) / k.fy).ravel()
        rays[:, 2] = 1.0
        return rays


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points in a sensor frame, each with a 3x3 covariance (m^2)."""

    points: np.ndarray
    covariances: np.ndarray
    sensor_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def concatenate(cls, clouds) -> "PointCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return cls.empty()
        ids = [
            c.sensor_ids if c.sensor_ids is not None else np.zeros(len(c), dtype=np.int64)
            for c in clouds
        ]
        return cls(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.covariances for c in clouds]),
            np.concatenate(ids),
        )


FACE_INSET = 1e-9


@njit(cache=True)
def _cast_rays(heights, res, x0, y0, origin, dirs, t_max, hmin, hmax):
    """Exact ray / column-heightfield intersection by grid traversal.

    Returns the ray parameter of the first hit, NaN for a miss.  A hit is
    either on a column top or on a vertical column face; face hits are moved
    FACE_INSET metres into the struck column so the point is attributed to it
    rather than to whichever side of the shared cell edge rounding picks.
    ``hmin``/``hmax`` bound the heights and only limit the traversal.
    """
    nx, ny = heights.shape
    n = dirs.shape[0]
    out = np.full(n, np.nan)
    ox, oy, oz = origin[0], origin[1], origin[2]
    for k in range(n):
        dx, dy, dz = dirs[k, 0], dirs[k, 1], dirs[k, 2]
        if dz >= 0.0:
            continue
        t = 0.0
        if oz > hmax:
            t = (oz - hmax) / -dz
        t_end = min(t_max, (oz - hmin) / -dz)
        if t > t_end:
            continue
        px = ox + t * dx
        py = oy + t * dy
        ix = int(math.floor((px - x0) / res))
        iy = int(math.floor((py - y0) / res))
        if ix < 0 or ix >= nx or iy < 0 or iy >= ny:
            continue
        step_x = 1 if dx > 0.0 else -1
        step_y = 1 if dy > 0.0 else -1
        if dx != 0.0:
            bx = x0 + (ix + (1 if dx > 0.0 else 0)) * res
            tnx = (bx - ox) / dx
            tdx = res / abs(dx)
        else:
            tnx = np.inf
            tdx = np.inf
        if dy != 0.0:
            by = y0 + (iy + (1 if dy > 0.0 else 0)) * res
            tny = (by - oy) / dy
            tdy = res / abs(dy)
        else:
            tny = np.inf
            tdy = np.inf
        inset = 0.0
        while True:
            h = heights[ix, iy]
            if oz + t * dz <= h:
                # entered this column below its top: vertical face (or start inside)
                if t + inset <= t_max:
                    out[k] = t + inset
                break
            t_exit = min(tnx, tny)
            t_top = (oz - h) / -dz
            if t_top <= t_exit:
                if t_top <= t_max:
                    out[k] = t_top
                break
            t = t_exit
            if t > t_end:
                break
            if tnx < tny:
                ix += step_x
                tnx += tdx
                inset = FACE_INSET / abs(dx)
            else:
                iy += step_y
                tny += tdy
                inset = FACE_INSET / abs(dy)
            if ix < 0 or ix >= nx or iy < 0 or iy >= ny:
                break
    return out


def cast_rays(heights, resolution, origin_xy, ray_origin, directions, t_max,
              bounds=None) -> np.ndarray:
    """Ray parameters of the first heightfield hit (NaN on a miss).

    ``bounds`` is an optional ``(min, max)`` enclosing every height; passing
    it avoids a scan of the whole heightfield per call.
    """
    if bounds is None:
        bounds = (float(np.min(heights)), float(np.max(heights)))
    return _cast_rays(
        np.ascontiguousarray(heights, dtype=np.float64),
        float(resolution),
        float(origin_xy[0]),
        float(origin_xy[1]),
        np.asarray(ray_origin, dtype=np.float64),
        np.ascontiguousarray(directions, dtype=np.float64),
        float(t_max),
        float(bounds[0]),
        float(bounds[1]),
    )


def simulate_depth_frame(field, sensor_pose: Pose, rig: SensorRig, noise: NoiseModel, seed,
                         heights: np.ndarray | None = None, sensor_id: int = 0) -> PointCloud:
    """Render one depth frame of ``field`` seen from ``sensor_pose`` (sensor in I).

    Each returned point carries ``diag((lateral z)^2, (lateral z)^2, sigma_z(z)^2)``
    in sensor axes, evaluated at the measured depth.  ``heights`` overrides the
    field's heightfield (e.g. with obstacles stamped in) and must stay within
    ``field.height_range``, as ``field.with_obstacles`` does.
    """
    rays = rig.pixel_rays()
    hf = field.heights if heights is None else heights
    if rig.max_range <= 0 or rays.size == 0:
        return PointCloud.empty()
    dirs = rays @ sensor_pose.rotation.matrix.T
    depth = cast_rays(hf, field.resolution, field.origin, sensor_pose.translation, dirs, rig.max_range,
                      field.height_range)

    rng = np.random.default_rng(seed)
    # draw for every ray so the stream does not depend on which rays hit
    draws = rng.standard_normal((len(rays), 3))

    hit = np.isfinite(depth)
    z = depth[hit]
    pts = rays[hit] * z[:, None]
    if noise.perturb:
        lat = noise.lateral * z
        pts[:, 0] += draws[hit, 0] * lat
        pts[:, 1] += draws[hit, 1] * lat
        pts[:, 2] += draws[hit, 2] * noise.sigma_z(z)
        keep = pts[:, 2] > 0.0
        pts = pts[keep]
    zm = pts[:, 2]
    cov = np.zeros((len(pts), 3, 3))
    cov[:, 0, 0] = cov[:, 1, 1] = np.square(noise.lateral * zm)
    cov[:, 2, 2] = np.square(noise.sigma_z(zm))
    return PointCloud(pts, cov, np.full(len(pts), sensor_id, dtype=np.int64))
