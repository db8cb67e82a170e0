"""Fused contour product and local/global map alignment.

Smoothing is a variance-weighted Gaussian convolution: neighbour ``j`` of
cell ``c`` gets weight ``G(dist) / var_j``, so uncertain cells melt into
their surroundings as their variance grows.  An optional consistency gate
drops neighbours with ``|h_j - h_c| > gate * sqrt(var_j + var_c)``; it keeps
sharp, well-measured edges but is off by default because a hard gate can add
texture rather than remove it.  The fused variance is that of the weighted mean of independent estimates,
``sum(w^2 var) / sum(w)^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Pose
from .mapping.grid import ElevationMap, GridPatch

CONFIDENCE_Z = 1.96
# neighbour consistency gate in combined sigmas; inf disables it
EDGE_GATE = math.inf
MIN_FILL_NEIGHBOURS = 3
MIN_OVERLAP = 100
# score = best cost / median cost over the search window; ~1 means no distinct match
ALIGN_SCORE_MAX = 0.5


class EmptyMap(ValueError):
    pass


class InsufficientOverlap(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FusedMap:
    height: np.ndarray
    sigma: np.ndarray
    valid: np.ndarray
    origin: tuple[int, int]
    resolution: float
    gradient: np.ndarray | None = None
    normal: np.ndarray | None = None
    curvature: np.ndarray | None = None

    @property
    def lower(self) -> np.ndarray:
        return self.height - CONFIDENCE_Z * self.sigma

    @property
    def upper(self) -> np.ndarray:
        return self.height + CONFIDENCE_Z * self.sigma

    @property
    def variance(self) -> np.ndarray:
        return np.square(self.sigma)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height.shape

    def centers(self):
        xs = (self.origin[0] + np.arange(self.shape[0]) + 0.5) * self.resolution
        ys = (self.origin[1] + np.arange(self.shape[1]) + 0.5) * self.resolution
        return xs, ys


def _as_patch(m) -> GridPatch:
    return m.snapshot() if isinstance(m, ElevationMap) else m


def kernel_offsets(sigma: float):
    """Integer offsets within ``2 sigma`` and their Gaussian weights."""
    if sigma <= 0:
        return [(0, 0, 1.0)]
    r = 2.0 * sigma
    n = int(math.floor(r))
    out = []
    for di in range(-n, n + 1):
        for dj in range(-n, n + 1):
            d2 = di * di + dj * dj
            if d2 <= r * r:
                out.append((di, dj, math.exp(-0.5 * d2 / (sigma * sigma))))
    return out


def fuse_map(raw, kernel_sigma_cells: float, gate: float = EDGE_GATE) -> FusedMap:
    """Smooth a raw elevation map into heights with 95% confidence bounds.

    ``kernel_sigma_cells = 0`` returns the raw heights unchanged.  Invalid
    cells are filled when at least three consistent valid neighbours lie
    within the kernel radius.
    """
    if kernel_sigma_cells < 0:
        raise ValueError("kernel sigma must be >= 0")
    p = _as_patch(raw)
    if not p.valid.any():
        raise EmptyMap("raw map has no valid cells")
    offsets = kernel_offsets(kernel_sigma_cells)
    r = max(max(abs(di), abs(dj)) for di, dj, _ in offsets)
    ni, nj = p.shape
    h = np.where(p.valid, p.height, 0.0)
    v = np.where(p.valid, p.variance, np.inf)
    hp = np.pad(h, r)
    vp = np.pad(v, r, constant_values=np.inf)
    okp = np.pad(p.valid, r)

    def at(a, di, dj):
        return a[r + di:r + di + ni, r + dj:r + dj + nj]

    # reference for gating: the cell itself, or for empty cells its strongest neighbour
    ref_h = h.copy()
    ref_v = np.where(p.valid, p.variance, np.inf)
    if r > 0:
        best = np.where(p.valid, np.inf, 0.0)
        for di, dj, g in offsets:
            if di == 0 and dj == 0:
                continue
            w = np.where(at(okp, di, dj), g / at(vp, di, dj), 0.0)
            take = (~p.valid) & (w > best)
            best = np.where(take, w, best)
            ref_h = np.where(take, at(hp, di, dj), ref_h)
            ref_v = np.where(take, at(vp, di, dj), ref_v)

    sw = np.zeros((ni, nj))
    swh = np.zeros((ni, nj))
    sw2v = np.zeros((ni, nj))
    count = np.zeros((ni, nj), dtype=np.int64)
    with np.errstate(invalid="ignore"):
        for di, dj, g in offsets:
            hn = at(hp, di, dj)
            vn = at(vp, di, dj)
            ok = at(okp, di, dj) & (np.abs(hn - ref_h) <= gate * np.sqrt(vn + ref_v))
            w = np.where(ok, g / np.where(ok, vn, 1.0), 0.0)
            sw += w
            # offsets from the reference keep uniform regions exact
            swh += np.where(ok, w * (hn - ref_h), 0.0)
            sw2v += np.where(ok, w * w * vn, 0.0)
            if di or dj:
                count += ok
    out_valid = p.valid | (count >= MIN_FILL_NEIGHBOURS)
    out_valid &= sw > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        height = np.where(out_valid, ref_h + swh / sw, np.nan)
        sigma = np.where(out_valid, np.sqrt(sw2v) / sw, np.nan)
    if kernel_sigma_cells == 0:
        height = np.where(p.valid, p.height, np.nan)
        sigma = np.where(p.valid, np.sqrt(p.variance), np.nan)
    return FusedMap(height, sigma, out_valid, p.origin, p.resolution)


def _pad_linear(a: np.ndarray) -> np.ndarray:
    """Pad by one cell with linear extrapolation (exact for planes)."""
    out = np.pad(a, 1)
    out[1:-1, 1:-1] = a
    out[0, 1:-1] = 2 * a[0] - a[1] if a.shape[0] > 1 else a[0]
    out[-1, 1:-1] = 2 * a[-1] - a[-2] if a.shape[0] > 1 else a[-1]
    out[:, 0] = 2 * out[:, 1] - out[:, 2] if a.shape[1] > 1 else out[:, 1]
    out[:, -1] = 2 * out[:, -2] - out[:, -3] if a.shape[1] > 1 else out[:, -2]
    return out


def surface_features(fused: FusedMap) -> FusedMap:
    """Populate gradient, normal and curvature layers.

    Gradient: central differences, one-sided at the borders.  Curvature: the
    5-point Laplacian (1/m).  Cells next to invalid ones come out NaN, and
    values within rounding noise of the heights are reported as exactly 0.
    """
    h = fused.height
    res = fused.resolution
    ni, nj = h.shape
    gx = np.gradient(h, res, axis=0) if ni > 1 else np.zeros_like(h)
    gy = np.gradient(h, res, axis=1) if nj > 1 else np.zeros_like(h)
    # differences below the floating-point resolution of the heights are noise
    eps = np.finfo(float).eps * max(1.0, float(np.nanmax(np.abs(h), initial=0.0)))
    gx = np.where(np.abs(gx) < 16 * eps / res, 0.0, gx)
    gy = np.where(np.abs(gy) < 16 * eps / res, 0.0, gy)
    gradient = np.stack([gx, gy], axis=-1)
    n = np.stack([-gx, -gy, np.ones_like(h)], axis=-1)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    hp = _pad_linear(h)
    lap = (hp[2:, 1:-1] + hp[:-2, 1:-1] + hp[1:-1, 2:] + hp[1:-1, :-2] - 4.0 * h) / (res * res)
    lap = np.where(np.abs(lap) < 64 * eps / (res * res), 0.0, lap)
    return replace(fused, gradient=gradient, normal=n, curvature=lap)


def _overlap(L: GridPatch, G: GridPatch, o):
    """Index slices pairing local cell p with global cell p - o."""
    # global index = local index + shift
    si = L.origin[0] - o[0] - G.origin[0]
    sj = L.origin[1] - o[1] - G.origin[1]
    i0, i1 = max(0, -si), min(L.shape[0], G.shape[0] - si)
    j0, j1 = max(0, -sj), min(L.shape[1], G.shape[1] - sj)
    if i1 <= i0 or j1 <= j0:
        return None
    return (slice(i0, i1), slice(j0, j1)), (slice(i0 + si, i1 + si), slice(j0 + sj, j1 + sj))


def _offset_cost(L: GridPatch, G: GridPatch, o):
    """(mutually valid cells, bias-compensated weighted MSE) at offset ``o``."""
    sl = _overlap(L, G, o)
    if sl is None:
        return 0, math.inf
    ls, gs = sl
    ok = L.valid[ls] & G.valid[gs]
    n = int(ok.sum())
    if n == 0:
        return 0, math.inf
    d = L.height[ls][ok] - G.height[gs][ok]
    w = 1.0 / (L.variance[ls][ok] + G.variance[gs][ok])
    sw = w.sum()
    d_bar = (w * d).sum() / sw
    return n, float((w * (d - d_bar) ** 2).sum() / sw)


def align_local_to_global(local, global_map, search_radius_cells: int,
                          min_overlap: int = MIN_OVERLAP):
    """Exhaustive integer-offset match of a local patch against a global map.

    The offset ``o`` says where the local content sits relative to the global
    map: ``local[p] ~ global[p - o]``.  Offsets are ranked by the
    variance-weighted mean squared height difference after removing the
    weighted mean difference (so a common height bias does not matter); ties
    go to the smallest offset norm, then lexicographic order.  The returned
    score is the best cost divided by the median cost over all offsets with
    enough overlap: well below 1 for a distinct match, close to 1 when the
    cost surface is flat.  Scores above ``ALIGN_SCORE_MAX`` mean low
    confidence.
    """
    L = _as_patch(local)
    G = _as_patch(global_map)
    if L.resolution != G.resolution:
        raise ValueError("local and global maps must share a resolution")
    n0, _ = _offset_cost(L, G, (0, 0))
    if n0 < min_overlap:
        raise InsufficientOverlap(f"{n0} mutually valid cells at zero offset, need {min_overlap}")
    rad = int(search_radius_cells)
    cands = [(dx, dy) for dx in range(-rad, rad + 1) for dy in range(-rad, rad + 1)]
    cands.sort(key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]))
    best, best_cost = (0, 0), math.inf
    costs = []
    for o in cands:
        n, cost = _offset_cost(L, G, o)
        if n < min_overlap:
            continue
        costs.append(cost)
        if cost < best_cost:
            best, best_cost = o, cost
    typical = float(np.median(costs))
    if typical > 0:
        score = best_cost / typical
    else:
        score = 0.0 if len(costs) == 1 or best_cost == 0 else math.inf
    return np.array(best, dtype=np.int64), float(score)


def apply_alignment(robot_est_pose: Pose, offset, resolution: float, map_yaw: float = 0.0) -> Pose:
    """Remove an alignment offset from the estimated pose.

    The pose moves by ``-offset * resolution`` (map axes) and its x/y
    covariance collapses to the quantisation floor ``resolution^2 / 12``.
    """
    o = np.asarray(offset, dtype=float) * resolution
    c, s = math.cos(map_yaw), math.sin(map_yaw)
    shift = np.array([c * o[0] - s * o[1], s * o[0] + c * o[1], 0.0])
    cov = robot_est_pose.covariance.copy()
    cov[:2, :] = 0.0
    cov[:, :2] = 0.0
    cov[0, 0] = cov[1, 1] = resolution * resolution / 12.0
    return Pose(robot_est_pose.translation - shift, robot_est_pose.rotation, cov)
