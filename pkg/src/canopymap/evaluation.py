"""Trajectory and map accuracy metrics against simulator ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, Rotation

ASSOCIATION_TOLERANCE = 0.010


class NoOverlap(ValueError):
    pass


class PathTooShort(ValueError):
    pass


def _quat_to_matrices(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-stamped poses; quaternions stored ``[w, x, y, z]``."""

    timestamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float).reshape(-1)
        p = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        q = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        if not (len(t) == len(p) == len(q)):
            raise ValueError("timestamps, positions and quaternions must have equal length")
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("timestamps must be strictly increasing")
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "quaternions", q)

    @classmethod
    def from_poses(cls, samples) -> "Trajectory":
        samples = list(samples)
        return cls(
            np.array([t for t, _ in samples], dtype=float),
            np.array([p.translation for _, p in samples]).reshape(-1, 3),
            np.array([p.rotation.quat for _, p in samples]).reshape(-1, 4),
        )

    def __len__(self) -> int:
        return len(self.timestamps)

    def pose(self, i: int) -> Pose:
        return Pose(self.positions[i], Rotation(self.quaternions[i]))

    def rotations(self) -> np.ndarray:
        return _quat_to_matrices(self.quaternions)

    def subset(self, idx) -> "Trajectory":
        return Trajectory(self.timestamps[idx], self.positions[idx], self.quaternions[idx])

    def shifted(self, dt: float) -> "Trajectory":
        return Trajectory(self.timestamps + dt, self.positions, self.quaternions)

    def arc_length(self) -> np.ndarray:
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


def associate(est: Trajectory, gt: Trajectory, tolerance: float = ASSOCIATION_TOLERANCE):
    """Nearest-timestamp pairs within ``tolerance`` seconds; returns index arrays."""
    if len(est) == 0 or len(gt) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    j = np.searchsorted(gt.timestamps, est.timestamps)
    j0 = np.clip(j - 1, 0, len(gt) - 1)
    j1 = np.clip(j, 0, len(gt) - 1)
    d0 = np.abs(gt.timestamps[j0] - est.timestamps)
    d1 = np.abs(gt.timestamps[j1] - est.timestamps)
    jj = np.where(d1 < d0, j1, j0)
    dd = np.minimum(d0, d1)
    keep = dd <= tolerance
    return np.flatnonzero(keep), jj[keep]


def umeyama_rigid(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation R and translation t with ``dst ~ R src + t``."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def absolute_pose_error(est: Trajectory, gt: Trajectory, align: bool = False):
    """Translational RMSE after timestamp association; returns ``(rmse, errors)``.

    Both trajectories are assumed to live in frame I; ``align=True`` first
    fits a rigid transform (for externally produced trajectories).
    """
    ie, ig = associate(est, gt)
    if len(ie) < 2:
        raise NoOverlap(f"only {len(ie)} associated samples")
    pe = est.positions[ie]
    pg = gt.positions[ig]
    if align:
        R, t = umeyama_rigid(pe, pg)
        pe = pe @ R.T + t
    err = np.linalg.norm(pe - pg, axis=1)
    return float(np.sqrt(np.mean(err**2))), err


def _relative(Ra, ta, Rb, tb):
    """inv(A) @ B for stacked rigid transforms."""
    RaT = np.transpose(Ra, (0, 2, 1))
    return RaT @ Rb, np.einsum("nij,nj->ni", RaT, tb - ta)


def relative_pose_error(est: Trajectory, gt: Trajectory, delta: float):
    """RMSE of relative-motion errors over sub-trajectories of arc length ``delta``.

    Returns ``(translational_rmse_m, rotational_rmse_rad)``.  The arc length is
    measured along the ground truth.
    """
    ie, ig = associate(est, gt)
    if len(ie) < 2:
        raise NoOverlap(f"only {len(ie)} associated samples")
    e = est.subset(ie)
    g = gt.subset(ig)
    s = g.arc_length()
    if s[-1] < delta:
        raise PathTooShort(f"path length {s[-1]:.3f} m shorter than delta {delta} m")
    i = np.arange(len(s))
    j = np.searchsorted(s, s + delta - 1e-12, side="left")
    ok = j < len(s)
    i, j = i[ok], j[ok]
    Re, Rg = e.rotations(), g.rotations()
    dRe, dte = _relative(Re[i], e.positions[i], Re[j], e.positions[j])
    dRg, dtg = _relative(Rg[i], g.positions[i], Rg[j], g.positions[j])
    # error transform inv(gt_rel) @ est_rel
    Rerr, terr = _relative(dRg, dtg, dRe, dte)
    t_err = np.linalg.norm(terr, axis=1)
    cos = np.clip((np.trace(Rerr, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    r_err = np.arccos(cos)
    return float(np.sqrt(np.mean(t_err**2))), float(np.sqrt(np.mean(r_err**2)))


def _layers(m):
    from .fusion import FusedMap
    from .mapping.grid import ElevationMap, GridPatch

    if isinstance(m, ElevationMap):
        m = m.snapshot()
    if isinstance(m, (GridPatch, FusedMap)):
        xs, ys = m.centers()
        return m.height, m.valid, xs, ys
    raise TypeError(f"unsupported map type {type(m).__name__}")


def map_rmse(emap, truth, sensed_mask=None, map_yaw: float = 0.0):
    """Height RMSE over valid cells against the truth under each cell centre.

    Coverage is the fraction of the sensed region holding a valid estimate;
    the sensed region defaults to every map cell over the truth field.
    Returns ``(rmse, coverage)``.
    """
    height, valid, xs, ys = _layers(emap)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    if map_yaw:
        c, s = math.cos(map_yaw), math.sin(map_yaw)
        X, Y = c * X - s * Y, s * X + c * Y
    th = truth.height_at(X, Y)
    region = np.isfinite(th)
    if sensed_mask is not None:
        region &= np.asarray(sensed_mask, dtype=bool)
    use = region & valid
    if not use.any():
        raise NoOverlap("no valid map cell overlaps the truth field")
    err = height[use] - th[use]
    rmse = float(np.sqrt(np.mean(err**2)))
    return rmse, float(use.sum() / region.sum())


def path_length(traj: Trajectory) -> float:
    return float(traj.arc_length()[-1]) if len(traj) else 0.0


def rmse(values) -> float:
    v = np.asarray(values, dtype=float)
    return math.sqrt(float(np.mean(v * v)))
