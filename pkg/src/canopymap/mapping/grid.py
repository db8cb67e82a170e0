"""Robot-centric rolling elevation grid.

Cells are addressed by integer world indices ``k = floor(coord / resolution)``
in the map frame; a cell's centre is ``(k + 0.5) * resolution``.  Storage is a
torus: world index ``k`` lives at ``k mod n``, so moving the window only
touches the rows and columns that scroll in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import FrameTree, Pose
from .cell import DEFAULT_GATE, MIN_VARIANCE, Cell, fuse_groups, measurement_variances


@dataclass(frozen=True, eq=False)
class GridPatch:
    """Immutable world-ordered snapshot of a grid window.

    ``height[i, j]`` is world cell ``(origin[0] + i, origin[1] + j)``; invalid
    cells hold NaN.
    """

    height: np.ndarray
    variance: np.ndarray
    valid: np.ndarray
    origin: tuple[int, int]
    resolution: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.height.shape

    def centers(self):
        xs = (self.origin[0] + np.arange(self.shape[0]) + 0.5) * self.resolution
        ys = (self.origin[1] + np.arange(self.shape[1]) + 0.5) * self.resolution
        return xs, ys

    def crop(self, i0: int, j0: int, ni: int, nj: int) -> "GridPatch":
        sl = (slice(i0, i0 + ni), slice(j0, j0 + nj))
        return GridPatch(
            self.height[sl].copy(),
            self.variance[sl].copy(),
            self.valid[sl].copy(),
            (self.origin[0] + i0, self.origin[1] + j0),
            self.resolution,
        )


@dataclass
class IngestStats:
    points: int = 0
    fused: int = 0
    replaced: int = 0
    discarded: int = 0
    out_of_bounds: int = 0
    cells_touched: int = 0
    cells_initialised: int = 0

    def __iadd__(self, other: "IngestStats") -> "IngestStats":
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self


@dataclass(eq=False)
class ElevationMap:
    """Square rolling grid of ``size`` x ``size`` cells centred on ``center``.

    Operations that update the map do so in place (single writer) and return
    the same object.
    """

    size: int
    resolution: float = 0.05
    center: tuple[int, int] = (0, 0)
    yaw: float = 0.0
    gate: float = DEFAULT_GATE
    height: np.ndarray = field(init=False)
    variance: np.ndarray = field(init=False)
    valid: np.ndarray = field(init=False)
    last_update: np.ndarray = field(init=False)
    frame: int = 0

    def __post_init__(self):
        if self.size < 1 or self.resolution <= 0:
            raise ValueError("size and resolution must be positive")
        self.center = (int(self.center[0]), int(self.center[1]))
        self.height = np.full((self.size, self.size), np.nan)
        self.variance = np.full((self.size, self.size), np.nan)
        self.valid = np.zeros((self.size, self.size), dtype=bool)
        self.last_update = np.full((self.size, self.size), -1, dtype=np.int64)

    @classmethod
    def create(cls, side_length: float = 10.0, resolution: float = 0.05,
               center_xy=(0.0, 0.0), **kwargs) -> "ElevationMap":
        size = int(round(side_length / resolution))
        center = (math.floor(center_xy[0] / resolution), math.floor(center_xy[1] / resolution))
        return cls(size=size, resolution=resolution, center=center, **kwargs)

    # -- indexing -----------------------------------------------------------
    @property
    def lower(self) -> tuple[int, int]:
        """World index of the window's first row/column."""
        h = self.size // 2
        return self.center[0] - h, self.center[1] - h

    def cell_index(self, x, y):
        kx = np.floor(np.asarray(x, dtype=float) / self.resolution).astype(np.int64)
        ky = np.floor(np.asarray(y, dtype=float) / self.resolution).astype(np.int64)
        return kx, ky

    def cell_position(self, kx, ky):
        return (np.asarray(kx) + 0.5) * self.resolution, (np.asarray(ky) + 0.5) * self.resolution

    def center_position(self) -> tuple[float, float]:
        x, y = self.cell_position(*self.center)
        return float(x), float(y)

    def in_window(self, kx, ky):
        lx, ly = self.lower
        kx = np.asarray(kx)
        ky = np.asarray(ky)
        return (kx >= lx) & (kx < lx + self.size) & (ky >= ly) & (ky < ly + self.size)

    def storage(self, kx, ky):
        return np.mod(kx, self.size), np.mod(ky, self.size)

    def get_cell(self, kx: int, ky: int) -> Cell:
        if not self.in_window(kx, ky):
            return Cell()
        i, j = self.storage(kx, ky)
        if not self.valid[i, j]:
            return Cell(last_update=int(self.last_update[i, j]))
        return Cell(float(self.height[i, j]), float(self.variance[i, j]), True,
                    int(self.last_update[i, j]))

    def set_cell(self, kx: int, ky: int, cell: Cell) -> None:
        if not self.in_window(kx, ky):
            raise IndexError(f"cell ({kx}, {ky}) outside the map window")
        i, j = self.storage(kx, ky)
        self.valid[i, j] = cell.valid
        self.height[i, j] = cell.height if cell.valid else np.nan
        self.variance[i, j] = cell.variance if cell.valid else np.nan
        self.last_update[i, j] = cell.last_update

    def _world_order(self, a: np.ndarray) -> np.ndarray:
        lx, ly = self.lower
        ix = np.mod(lx + np.arange(self.size), self.size)
        iy = np.mod(ly + np.arange(self.size), self.size)
        return a[np.ix_(ix, iy)]

    def snapshot(self) -> GridPatch:
        return GridPatch(
            self._world_order(self.height),
            self._world_order(self.variance),
            self._world_order(self.valid),
            self.lower,
            self.resolution,
        )

    def valid_count(self) -> int:
        return int(self.valid.sum())

    def copy(self) -> "ElevationMap":
        m = ElevationMap(self.size, self.resolution, self.center, self.yaw, self.gate)
        m.height[:] = self.height
        m.variance[:] = self.variance
        m.valid[:] = self.valid
        m.last_update[:] = self.last_update
        m.frame = self.frame
        return m

    def _invalidate(self, rows=None, cols=None) -> None:
        for arr, fill in ((self.height, np.nan), (self.variance, np.nan),
                          (self.valid, False), (self.last_update, -1)):
            if rows is not None:
                arr[rows, :] = fill
            if cols is not None:
                arr[:, cols] = fill

    def shift_content(self, dx: int, dy: int) -> "ElevationMap":
        """Move every cell's content by (dx, dy) whole cells in world index.

        Content shifted outside the window is lost; vacated cells become
        invalid.  Used to apply a map-alignment correction.
        """
        if dx == 0 and dy == 0:
            return self
        snap = self.snapshot()
        lx, ly = self.lower
        self._invalidate(rows=slice(None))
        for src, dst in ((snap.height, self.height), (snap.variance, self.variance),
                         (snap.valid, self.valid)):
            out = np.empty_like(src)
            out[...] = np.nan if src.dtype != bool else False
            n = self.size
            si = slice(max(0, -dx), min(n, n - dx))
            sj = slice(max(0, -dy), min(n, n - dy))
            di = slice(max(0, dx), min(n, n + dx))
            dj = slice(max(0, dy), min(n, n + dy))
            out[di, dj] = src[si, sj]
            ix = np.mod(lx + np.arange(n), n)
            iy = np.mod(ly + np.arange(n), n)
            dst[np.ix_(ix, iy)] = out
        self.last_update[self.valid] = self.frame
        return self


def recenter_map(emap: ElevationMap, new_robot_xy) -> ElevationMap:
    """Scroll the window by whole cells so the robot sits at its centre.

    Displacements under one cell along an axis leave that axis untouched.
    Cells scrolling in are invalid; retained cells keep their values and
    world coordinates.
    """
    cx, cy = emap.center_position()
    sx = int(math.trunc((float(new_robot_xy[0]) - cx) / emap.resolution))
    sy = int(math.trunc((float(new_robot_xy[1]) - cy) / emap.resolution))
    if sx == 0 and sy == 0:
        return emap
    n = emap.size
    lx, ly = emap.lower
    emap.center = (emap.center[0] + sx, emap.center[1] + sy)
    if abs(sx) >= n:
        emap._invalidate(rows=slice(None))
    elif sx:
        new = np.arange(lx + n, lx + n + sx) if sx > 0 else np.arange(lx + sx, lx)
        emap._invalidate(rows=np.mod(new, n))
    if abs(sy) >= n:
        emap._invalidate(cols=slice(None))
    elif sy:
        new = np.arange(ly + n, ly + n + sy) if sy > 0 else np.arange(ly + sy, ly)
        emap._invalidate(cols=np.mod(new, n))
    return emap


def propagate_motion_uncertainty(emap: ElevationMap, delta_cov, robot_pose: Pose) -> ElevationMap:
    """Inflate cell variances by a pose-covariance increment.

    ``delta_cov`` is a PSD 6x6 increment over ``[x, y, z, rx, ry, rz]`` with
    map-aligned translation axes and a body-frame rotation block.  Each cell
    gains ``J dS J^T`` with ``J = [0, 0, 1, (lever-arm tilt terms), d]``: the
    vertical offset, the height change under roll/pitch about the robot, and
    yaw times the horizontal lever arm ``d`` (converted to height with a unit
    slope, a conservative bound).
    """
    dS = np.asarray(delta_cov, dtype=float)
    if not np.any(dS):
        return emap
    i, j = np.nonzero(emap.valid)
    if i.size == 0:
        return emap
    lx, ly = emap.lower
    kx = lx + np.mod(i - lx, emap.size)
    ky = ly + np.mod(j - ly, emap.size)
    px, py = emap.cell_position(kx, ky)
    rx = px - robot_pose.translation[0]
    ry = py - robot_pose.translation[1]
    d = np.hypot(rx, ry)

    # world-frame tilt (wx, wy) -> dz = wx * ry - wy * rx; body -> world via robot yaw
    c, s = math.cos(robot_pose.yaw), math.sin(robot_pose.yaw)
    jb_x = ry * c - rx * s
    jb_y = -ry * s - rx * c
    J = np.zeros((i.size, 6))
    J[:, 2] = 1.0
    J[:, 3] = jb_x
    J[:, 4] = jb_y
    J[:, 5] = d
    inc = np.einsum("nj,jk,nk->n", J, dS, J)
    emap.variance[i, j] += np.maximum(inc, 0.0)
    return emap


def _sigma_phi_sensor(robot_pose: Pose, mount: Pose, mount_rot_cov) -> np.ndarray:
    Rbs = mount.rotation.matrix
    sig = Rbs.T @ robot_pose.covariance[3:, 3:] @ Rbs
    if mount_rot_cov is not None:
        sig = sig + np.asarray(mount_rot_cov)
    return sig


def ingest_point_cloud(emap: ElevationMap, cloud, robot_pose: Pose, frames: FrameTree,
                       mount_rot_cov=None) -> tuple[ElevationMap, IngestStats]:
    """Fuse one frame of sensor points into the map.

    ``cloud.sensor_ids`` index ``frames.mounts`` in insertion order.  Every
    point becomes a height measurement with propagated variance; all
    measurements landing in one cell are reduced together, so the result does
    not depend on point order.
    """
    stats = IngestStats(points=len(cloud))
    emap.frame += 1
    if len(cloud) == 0:
        return emap, stats
    keys = list(frames.mounts)
    ids = cloud.sensor_ids if cloud.sensor_ids is not None else np.zeros(len(cloud), dtype=np.int64)
    xs, ys, hs, vs = [], [], [], []
    for sid in np.unique(ids):
        sel = ids == sid
        key = keys[int(sid)]
        pose = frames.sensor_in_map(robot_pose, key)
        pts = cloud.points[sel]
        p_M = pose.transform(pts)
        sig_phi = _sigma_phi_sensor(robot_pose, frames.mounts[key], mount_rot_cov)
        var = measurement_variances(pts, cloud.covariances[sel], sig_phi, pose.rotation.matrix)
        xs.append(p_M[:, 0])
        ys.append(p_M[:, 1])
        hs.append(p_M[:, 2])
        vs.append(var)
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    h = np.concatenate(hs)
    v = np.maximum(np.concatenate(vs), MIN_VARIANCE)

    kx, ky = emap.cell_index(x, y)
    inside = emap.in_window(kx, ky)
    stats.out_of_bounds = int((~inside).sum())
    if not inside.any():
        return emap, stats
    kx, ky, h, v = kx[inside], ky[inside], h[inside], v[inside]
    sx, sy = emap.storage(kx, ky)
    order = np.lexsort((v, h, sy, sx))
    sx, sy, h, v = sx[order], sy[order], h[order], v[order]
    boundary = np.flatnonzero((np.diff(sx) != 0) | (np.diff(sy) != 0)) + 1
    starts = np.concatenate([[0], boundary, [len(h)]]).astype(np.int64)
    gx = sx[starts[:-1]].astype(np.int64)
    gy = sy[starts[:-1]].astype(np.int64)
    fused, replaced, discarded, init = fuse_groups(
        emap.height, emap.variance, emap.valid, emap.last_update, gx, gy, starts,
        np.ascontiguousarray(h), np.ascontiguousarray(v), float(emap.gate), emap.frame,
    )
    stats.fused = int(fused)
    stats.replaced = int(replaced)
    stats.discarded = int(discarded)
    stats.cells_touched = int(len(gx))
    stats.cells_initialised = int(init)
    return emap, stats
