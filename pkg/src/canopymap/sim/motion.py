"""Unicycle UGV with a drifting pose estimate.

The true vehicle integrates the commanded (v, omega) exactly.  The estimator
integrates the same command corrupted by white noise and a random-walk bias:

    v_m = v + b_v + n_v,   n_v ~ N(0, acc_n^2 / dt),   b_v' = b_v + N(0, acc_w^2 dt)
    w_m = w + b_w + n_w,   n_w ~ N(0, gyr_n^2 / dt),   b_w' = b_w + N(0, gyr_w^2 dt)

so the IMU densities act at velocity level and along-track position variance
grows linearly with distance travelled.  The error covariance over
``[x, y, yaw, b_v, b_w]`` is propagated to first order alongside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import Pose, compose_yaw_tilt, wrap_angle
from .sensor import NoiseModel

WHEELBASE = 1.5

# positions of the planar error states inside the 6x6 pose covariance
_POSE_IDX = np.array([0, 1, 5])


@dataclass(frozen=True, eq=False)
class UGVState:
    true_pose: Pose
    est_pose: Pose
    error_cov: np.ndarray = field(default_factory=lambda: np.zeros((5, 5)))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(2))
    wheel_speeds: tuple[float, float] = (0.0, 0.0)
    wheelbase: float = WHEELBASE
    timestamp: float = 0.0
    odometer: float = 0.0

    @classmethod
    def at(cls, x: float = 0.0, y: float = 0.0, yaw: float = 0.0, z: float = 0.0,
           timestamp: float = 0.0) -> "UGVState":
        pose = Pose.from_xyz_ypr([x, y, z], yaw)
        return cls(true_pose=pose, est_pose=pose, timestamp=timestamp)

    @property
    def est_xy_yaw(self) -> np.ndarray:
        return np.array([*self.est_pose.translation[:2], self.est_pose.yaw])

    @property
    def true_xy_yaw(self) -> np.ndarray:
        return np.array([*self.true_pose.translation[:2], self.true_pose.yaw])

    def with_estimate(self, pose: Pose) -> "UGVState":
        """Replace the estimated pose, e.g. after a map-alignment correction.

        The planar block of ``pose.covariance`` overwrites the internal error
        covariance; cross terms with the xy states are dropped when the xy
        variance shrinks, which keeps the matrix PSD.
        """
        P = self.error_cov.copy()
        new = pose.covariance[np.ix_(_POSE_IDX, _POSE_IDX)]
        if not np.allclose(new[:2, :2], P[:2, :2]):
            P[:2, :] = 0.0
            P[:, :2] = 0.0
            P[:2, :2] = new[:2, :2]
        return replace(self, est_pose=Pose(pose.translation, pose.rotation, _pose_cov(P)),
                       error_cov=P)


def _pose_cov(P: np.ndarray) -> np.ndarray:
    C = np.zeros((6, 6))
    C[np.ix_(_POSE_IDX, _POSE_IDX)] = P[:3, :3]
    return C


def _unicycle(x, y, yaw, v, w, dt):
    if abs(w) < 1e-12:
        c, s = math.cos(yaw), math.sin(yaw)
        return x + v * dt * c, y + v * dt * s, yaw
    yaw1 = yaw + w * dt
    r = v / w
    return x + r * (math.sin(yaw1) - math.sin(yaw)), y - r * (math.cos(yaw1) - math.cos(yaw)), yaw1


def step_ugv(state: UGVState, command, dt: float, noise: NoiseModel, seed) -> UGVState:
    """Advance true and estimated poses by one step of ``dt`` seconds."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v, w = float(command[0]), float(command[1])
    rng = np.random.default_rng(seed)
    n = rng.standard_normal(4)

    tx, ty, tyaw = state.true_xy_yaw
    tx, ty, tyaw = _unicycle(tx, ty, tyaw, v, w, dt)
    z_true = state.true_pose.translation[2]
    true_pose = Pose([tx, ty, z_true], compose_yaw_tilt(wrap_angle(tyaw), 0.0, 0.0))

    bv, bw = state.bias
    v_m = v + bv + n[0] * noise.acc_n / math.sqrt(dt)
    w_m = w + bw + n[1] * noise.gyr_n / math.sqrt(dt)
    ex, ey, eyaw = state.est_xy_yaw
    nx, ny, nyaw = _unicycle(ex, ey, eyaw, v_m, w_m, dt)
    bias = np.array([bv + n[2] * noise.acc_w * math.sqrt(dt), bw + n[3] * noise.gyr_w * math.sqrt(dt)])

    # first-order error propagation, linearised at the estimate (midpoint heading)
    ym = eyaw + 0.5 * w_m * dt
    c, s = math.cos(ym), math.sin(ym)
    F = np.eye(5)
    F[0, 2] = -v_m * dt * s
    F[1, 2] = v_m * dt * c
    F[0, 3] = dt * c
    F[1, 3] = dt * s
    F[0, 4] = -0.5 * v_m * dt * dt * s
    F[1, 4] = 0.5 * v_m * dt * dt * c
    F[2, 4] = dt
    # white noise enters exactly like the bias, but not the bias states themselves
    G = F[:, 3:5].copy()
    G[3:, :] = 0.0
    Qn = np.diag([noise.acc_n**2 / dt, noise.gyr_n**2 / dt])
    P = F @ state.error_cov @ F.T + G @ Qn @ G.T
    P[3, 3] += noise.acc_w**2 * dt
    P[4, 4] += noise.gyr_w**2 * dt
    P = 0.5 * (P + P.T)

    z_est = state.est_pose.translation[2]
    est_pose = Pose([nx, ny, z_est], compose_yaw_tilt(wrap_angle(nyaw), 0.0, 0.0), _pose_cov(P))
    half = 0.5 * w * state.wheelbase
    return replace(
        state,
        true_pose=true_pose,
        est_pose=est_pose,
        error_cov=P,
        bias=bias,
        wheel_speeds=(v - half, v + half),
        timestamp=state.timestamp + dt,
        odometer=state.odometer + abs(v) * dt,
    )


def psd_increment(before: np.ndarray, after: np.ndarray) -> np.ndarray:
    """PSD part of ``after - before`` (negative eigen-directions clipped)."""
    d = 0.5 * ((after - before) + (after - before).T)
    vals, vecs = np.linalg.eigh(d)
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals) @ vecs.T
