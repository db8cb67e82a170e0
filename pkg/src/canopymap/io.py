"""Text and image formats for maps, heightfields and trajectories.

All writers format numbers explicitly so identical inputs give identical
bytes on every platform.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .evaluation import Trajectory

PGM_MAX = 65535


def _fmt(v: float, spec: str) -> str:
    return "nan" if not math.isfinite(v) else format(v, spec)


def write_grid_csv(path, xs, ys, header, layers, formats) -> Path:
    """Write world-ordered 2D layers as ``x,y,<layers...>`` (x-major order)."""
    path = Path(path)
    ni, nj = len(xs), len(ys)
    X = np.repeat(np.asarray(xs), nj)
    Y = np.tile(np.asarray(ys), ni)
    cols = [[_fmt(v, "0.6f") for v in X], [_fmt(v, "0.6f") for v in Y]]
    for layer, spec in zip(layers, formats):
        flat = np.asarray(layer).reshape(-1)
        if flat.dtype == bool:
            cols.append(["1" if b else "0" for b in flat])
        else:
            cols.append([_fmt(float(v), spec) for v in flat])
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(row) + "\n")
    return path


def write_raw_map_csv(path, patch) -> Path:
    xs, ys = patch.centers()
    return write_grid_csv(
        path, xs, ys, ["x", "y", "height", "variance", "valid"],
        [np.where(patch.valid, patch.height, np.nan), np.where(patch.valid, patch.variance, np.nan),
         patch.valid],
        ["0.9f", "0.9e", None],
    )


FUSED_COLUMNS = ["x", "y", "height", "lower", "upper", "grad_x", "grad_y", "curvature"]


def write_fused_map_csv(path, fused) -> Path:
    xs, ys = fused.centers()
    v = fused.valid
    grad = fused.gradient if fused.gradient is not None else np.full(fused.shape + (2,), np.nan)
    curv = fused.curvature if fused.curvature is not None else np.full(fused.shape, np.nan)
    layers = [
        np.where(v, fused.height, np.nan),
        np.where(v, fused.lower, np.nan),
        np.where(v, fused.upper, np.nan),
        np.where(v, grad[..., 0], np.nan),
        np.where(v, grad[..., 1], np.nan),
        np.where(v, curv, np.nan),
    ]
    return write_grid_csv(path, xs, ys, FUSED_COLUMNS, layers, ["0.9f"] * 3 + ["0.9e"] * 3)


def read_grid_csv(path):
    """Read a grid CSV back into ``(xs, ys, {column: 2D array})``."""
    path = Path(path)
    with open(path, encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    xs = np.unique(data[:, 0])
    ys = np.unique(data[:, 1])
    ni, nj = len(xs), len(ys)
    if ni * nj != len(data):
        raise ValueError(f"{path.name}: rows do not form a full grid")
    out = {name: data[:, k].reshape(ni, nj) for k, name in enumerate(header) if k >= 2}
    return xs, ys, out


def pgm_bytes(grid: np.ndarray, valid: np.ndarray, lo: float, hi: float) -> bytes:
    """16-bit binary PGM of a world-ordered grid (north up, x to the right).

    Valid values map linearly from [lo, hi] onto 1..65535 (clipped); 0 marks
    invalid cells.
    """
    g = np.asarray(grid, dtype=float)
    ok = np.asarray(valid, dtype=bool) & np.isfinite(g)
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((np.where(ok, g, lo) - lo) / span, 0.0, 1.0)
    q = (1 + np.floor(scaled * (PGM_MAX - 1) + 0.5)).astype(np.uint32)
    q = np.where(ok, q, 0).astype(">u2")
    img = q.T[::-1, :]
    head = f"P5\n{img.shape[1]} {img.shape[0]}\n{PGM_MAX}\n".encode("ascii")
    return head + np.ascontiguousarray(img).tobytes()


def write_pgm(path, grid, valid, value_range=None) -> Path:
    """Write the PGM plus a ``<name>.range.txt`` sidecar holding ``lo hi``."""
    path = Path(path)
    g = np.asarray(grid, dtype=float)
    ok = np.asarray(valid, dtype=bool) & np.isfinite(g)
    if value_range is None:
        lo, hi = (float(g[ok].min()), float(g[ok].max())) if ok.any() else (0.0, 1.0)
    else:
        lo, hi = map(float, value_range)
    path.write_bytes(pgm_bytes(g, ok, lo, hi))
    path.with_name(path.name + ".range.txt").write_text(f"{lo:.9f} {hi:.9f}\n", encoding="ascii")
    return path


def read_pgm(path):
    """Return ``(image uint16 array, maxval)`` from a binary 16-bit PGM."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = parts[4] if len(parts) > 4 else b""
    return np.frombuffer(data[: 2 * w * h], dtype=">u2").reshape(h, w), maxval


def write_heightfield_csv(path, field) -> Path:
    xs, ys = field.cell_centers()
    return write_grid_csv(path, xs, ys, ["x", "y", "height", "male"],
                          [field.heights, field.male_mask], ["0.9f", None])


def write_heightfield_pgm(path, field, value_range=None) -> Path:
    return write_pgm(path, field.heights, np.ones(field.shape, dtype=bool), value_range)


def write_trajectory(path, traj: Trajectory) -> Path:
    """``timestamp tx ty tz qx qy qz qw`` per line."""
    path = Path(path)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
            w, x, y, z = q
            fh.write(
                f"{t:.6f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} {x:.12f} {y:.12f} {z:.12f} {w:.12f}\n"
            )
    return path


def read_trajectory(path) -> Trajectory:
    rows = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 8:
                raise ValueError(f"{path}: expected 8 fields, got {len(vals)}")
            rows.append(vals)
    a = np.array(rows, dtype=float).reshape(-1, 8)
    quats = np.column_stack([a[:, 7], a[:, 4], a[:, 5], a[:, 6]])
    return Trajectory(a[:, 0], a[:, 1:4], quats)
