"""Rotations, poses and the sensor -> map transform chain.

Frames: I (inertial, fixed to the field), B (vehicle base), S (depth sensor),
M (map).  M shares the vertical axis of I and carries a fixed yaw.

Euler convention is intrinsic Z(yaw) * Y(pitch) * X(roll): a vector is tilted
first (roll about x, then pitch about y) and yawed last, so the yaw factor
separates out as a pure rotation about the vertical axis.

Pose covariances are 6x6 over ``[x, y, z, rx, ry, rz]``; the rotational block
is a small-angle perturbation expressed in the body frame
(``R_true = R_est @ exp(delta)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GIMBAL_EPS = 1e-9


class GimbalLockError(ValueError):
    """Raised when pitch is too close to +-pi/2 for a unique decomposition."""


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(a) @ b == np.cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("quaternion must be finite and non-zero")
    q = q / n
    # q and -q are the same rotation; keep w >= 0 so outputs are deterministic
    if q[0] < 0.0:
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class Rotation:
    """Element of SO(3) stored as a unit quaternion ``[w, x, y, z]``."""

    quat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quat", _canonical(self.quat))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        h = 0.5 * angle
        return cls(np.concatenate([[math.cos(h)], math.sin(h) * axis]))

    @classmethod
    def from_rotvec(cls, rotvec) -> "Rotation":
        rotvec = np.asarray(rotvec, dtype=float)
        angle = float(np.linalg.norm(rotvec))
        if angle < 1e-12:
            return cls(np.concatenate([[1.0], 0.5 * rotvec]))
        return cls.from_axis_angle(rotvec / angle, angle)

    @classmethod
    def from_matrix(cls, R) -> "Rotation":
        R = np.asarray(R, dtype=float)
        tr = R[0, 0] + R[1, 1] + R[2, 2]
        # Shepperd's method: pivot on the largest diagonal term
        if tr > 0.0:
            s = 2.0 * math.sqrt(tr + 1.0)
            q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
            s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        elif R[1, 1] > R[2, 2]:
            s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
            q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        else:
            s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
            q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        return cls(np.array(q))

    @property
    def matrix(self) -> np.ndarray:
        w, x, y, z = self.quat
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def inverse(self) -> "Rotation":
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(_quat_mul(self.quat, other.quat))

    def apply(self, v) -> np.ndarray:
        """Rotate a 3-vector or an (N, 3) array of vectors."""
        v = np.asarray(v, dtype=float)
        return v @ self.matrix.T

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        w = min(1.0, abs(float(self.quat[0])))
        return 2.0 * math.atan2(math.sqrt(max(0.0, 1.0 - w * w)), w)

    def yaw_pitch_roll(self) -> tuple[float, float, float]:
        return decompose_rotation(self)

    def __repr__(self) -> str:
        return f"Rotation(quat={np.array2string(self.quat, precision=6)})"


def compose_yaw_tilt(yaw: float, pitch: float, roll: float) -> Rotation:
    """Rotation ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``: tilt first, then yaw."""
    qz = np.array([math.cos(0.5 * yaw), 0.0, 0.0, math.sin(0.5 * yaw)])
    qy = np.array([math.cos(0.5 * pitch), 0.0, math.sin(0.5 * pitch), 0.0])
    qx = np.array([math.cos(0.5 * roll), math.sin(0.5 * roll), 0.0, 0.0])
    return Rotation(_quat_mul(qz, _quat_mul(qy, qx)))


def decompose_rotation(R) -> tuple[float, float, float]:
    """Inverse of :func:`compose_yaw_tilt`; returns ``(yaw, pitch, roll)``.

    Yaw is wrapped to (-pi, pi].  Raises :class:`GimbalLockError` when
    ``|R[2, 0]| > 1 - 1e-9``.
    """
    M = R.matrix if isinstance(R, Rotation) else np.asarray(R, dtype=float)
    if abs(M[2, 0]) > 1.0 - GIMBAL_EPS:
        raise GimbalLockError(f"pitch singular: R[2,0] = {M[2, 0]:.12f}")
    pitch = math.atan2(-M[2, 0], math.hypot(M[2, 1], M[2, 2]))
    roll = math.atan2(M[2, 1], M[2, 2])
    yaw = math.atan2(M[1, 0], M[0, 0])
    if yaw <= -math.pi:
        yaw += 2.0 * math.pi
    return yaw, pitch, roll


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True, eq=False)
class Pose:
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: Rotation = field(default_factory=Rotation.identity)
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        c = np.asarray(self.covariance, dtype=float).reshape(6, 6)
        if not np.all(np.isfinite(t)):
            raise ValueError("pose translation must be finite")
        if not np.allclose(c, c.T, atol=1e-12, rtol=0.0):
            raise ValueError("pose covariance must be symmetric")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "covariance", 0.5 * (c + c.T))

    @classmethod
    def from_xyz_ypr(cls, xyz, yaw=0.0, pitch=0.0, roll=0.0, covariance=None) -> "Pose":
        cov = np.zeros((6, 6)) if covariance is None else covariance
        return cls(np.asarray(xyz, dtype=float), compose_yaw_tilt(yaw, pitch, roll), cov)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix
        T[:3, 3] = self.translation
        return T

    @property
    def yaw(self) -> float:
        R = self.rotation.matrix
        return math.atan2(R[1, 0], R[0, 0])

    def transform(self, points) -> np.ndarray:
        """Map points from this pose's child frame into its parent frame."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.matrix.T + self.translation

    def compose(self, child: "Pose") -> "Pose":
        """``self * child``; the covariance of ``self`` is carried over unchanged."""
        return Pose(
            self.transform(child.translation),
            self.rotation @ child.rotation,
            self.covariance,
        )

    def inverse(self) -> "Pose":
        inv = self.rotation.inverse()
        return Pose(-inv.apply(self.translation), inv)

    def with_covariance(self, covariance) -> "Pose":
        return Pose(self.translation, self.rotation, covariance)


def sensor_point_to_map(r_SP, sensor_pose_in_map: Pose) -> np.ndarray:
    """Express a sensor-frame point (or (N, 3) array) in the map frame.

    Rotate by the sensor-to-map rotation, then add the sensor origin in M.
    """
    return sensor_pose_in_map.transform(r_SP)


def project_height(p_M) -> float | np.ndarray:
    """Height component ``[0 0 1] @ p`` of a map-frame point (or points)."""
    p = np.asarray(p_M, dtype=float)
    h = p[..., 2]
    return float(h) if h.ndim == 0 else h


@dataclass(frozen=True)
class FrameTree:
    """Fixed I -> B -> S chain plus the yaw of the map frame.

    ``mounts`` maps a sensor id to its pose in the base frame.  The map frame
    has zero pitch and roll by construction; only its yaw is stored.
    """

    mounts: dict
    map_yaw: float = 0.0

    @property
    def map_rotation(self) -> Rotation:
        return compose_yaw_tilt(self.map_yaw, 0.0, 0.0)

    def robot_in_map(self, robot_pose: Pose) -> Pose:
        """Re-express an inertial-frame robot pose in the map frame."""
        r_MI = self.map_rotation.inverse()
        c = robot_pose.covariance.copy()
        Rm = r_MI.matrix
        # translation block rotates with the frame; body-frame rotation block does not
        c[:3, :3] = Rm @ c[:3, :3] @ Rm.T
        c[:3, 3:] = Rm @ c[:3, 3:]
        c[3:, :3] = c[:3, 3:].T
        return Pose(r_MI.apply(robot_pose.translation), r_MI @ robot_pose.rotation, c)

    def sensor_in_map(self, robot_pose: Pose, sensor_id) -> Pose:
        return self.robot_in_map(robot_pose).compose(self.mounts[sensor_id])
