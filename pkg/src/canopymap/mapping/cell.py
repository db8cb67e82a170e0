"""Per-cell height estimation: variance propagation, 1D Kalman fusion and
Mahalanobis gating of competing measurements."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from ..geometry import Rotation

DEFAULT_GATE = 2.0
# zero-noise sensors still need a positive variance for the Kalman algebra
MIN_VARIANCE = 1e-12

P_HEIGHT = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Cell:
    height: float = math.nan
    variance: float = math.nan
    valid: bool = False
    last_update: int = -1


@dataclass(frozen=True)
class HeightMeasurement:
    mean: float
    variance: float
    index: tuple[int, int] | None = None

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("measurement variance must be positive")


def measurement_variance(r_SP, sigma_S, sigma_phi, R_SM) -> float:
    """Height variance of a sensor point after the sensor -> map transform.

    ``R_SM`` rotates sensor-frame vectors into the map frame; ``sigma_phi`` is
    the covariance of a small rotation perturbation expressed in the sensor
    frame.  First-order propagation through ``J_S = P R`` and
    ``J_phi = P R [r_SP]x``.
    """
    R = R_SM.matrix if isinstance(R_SM, Rotation) else np.asarray(R_SM, dtype=float)
    r = np.asarray(r_SP, dtype=float)
    J_S = P_HEIGHT @ R
    J_phi = J_S @ np.array([[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]])
    var = J_S @ np.asarray(sigma_S) @ J_S + J_phi @ np.asarray(sigma_phi) @ J_phi
    return max(float(var), 0.0)


def measurement_variances(points: np.ndarray, covs: np.ndarray, sigma_phi: np.ndarray,
                          R: np.ndarray) -> np.ndarray:
    """Vectorised :func:`measurement_variance` for (N, 3) points sharing one rotation."""
    a = R[2, :]
    var_s = np.einsum("j,njk,k->n", a, covs, a)
    # a^T [r]x = (a x r)^T
    j_phi = np.cross(a, points)
    var_phi = np.einsum("nj,jk,nk->n", j_phi, sigma_phi, j_phi)
    return np.maximum(var_s + var_phi, 0.0)


@njit(cache=True)
def _kalman(h, v, p, s):
    return (s * h + v * p) / (s + v), v * s / (v + s)


def kalman_update(prior: Cell, meas: HeightMeasurement) -> Cell:
    """Fuse one height measurement into a valid cell (1D Kalman filter)."""
    if not prior.valid or not prior.variance > 0:
        raise ValueError("prior cell must be valid with positive variance")
    h, v = _kalman(prior.height, prior.variance, meas.mean, meas.variance)
    return Cell(h, v, True, prior.last_update)


@njit(cache=True)
def _fuse_one(h, v, valid, cm, cv, gate, cl_m, cl_v, cl_n):
    """Fuse candidates (sorted ascending by mean, then variance) into one cell.

    Candidates are first reduced into clusters: walking upward, a candidate
    joins the running cluster when within ``gate`` of its fused estimate.
    Clusters within ``gate`` of the prior are Kalman-fused; the highest
    gated-out cluster above the estimate replaces it; lower outliers are
    dropped.  An empty cell takes the highest cluster.

    Returns (height, variance, valid, n_fused, n_replaced, n_discarded).
    """
    n = cm.shape[0]
    nc = 0
    for k in range(n):
        if nc > 0:
            m = cl_m[nc - 1]
            s = cl_v[nc - 1]
            if abs(cm[k] - m) <= gate * math.sqrt(cv[k] + s):
                cl_m[nc - 1], cl_v[nc - 1] = _kalman(m, s, cm[k], cv[k])
                cl_n[nc - 1] += 1
                continue
        cl_m[nc] = cm[k]
        cl_v[nc] = cv[k]
        cl_n[nc] = 1
        nc += 1

    if not valid:
        top = nc - 1
        return cl_m[top], cl_v[top], True, cl_n[top], 0, n - cl_n[top]

    h0 = h
    v0 = v
    fused = 0
    discarded = 0
    best = -1
    for c in range(nc):
        d = abs(cl_m[c] - h0) / math.sqrt(cl_v[c] + v0)
        if d <= gate:
            h, v = _kalman(h, v, cl_m[c], cl_v[c])
            fused += cl_n[c]
        elif cl_m[c] > h0:
            if best >= 0:
                discarded += cl_n[best]
            best = c
        else:
            discarded += cl_n[c]
    replaced = 0
    if best >= 0:
        if cl_m[best] > h:
            h = cl_m[best]
            v = cl_v[best]
            replaced = cl_n[best]
            discarded += fused
            fused = 0
        else:
            discarded += cl_n[best]
    return h, v, True, fused, replaced, discarded


def _sorted_candidates(candidates):
    cm = np.array([c.mean for c in candidates], dtype=float)
    cv = np.array([c.variance for c in candidates], dtype=float)
    order = np.lexsort((cv, cm))
    return cm[order], cv[order]


def mahalanobis_fuse_stats(cell: Cell, candidates, gate: float = DEFAULT_GATE):
    if not candidates:
        raise ValueError("candidates must be non-empty")
    if not gate > 0:
        raise ValueError("gate must be positive")
    cm, cv = _sorted_candidates(candidates)
    n = len(cm)
    scratch = (np.empty(n), np.empty(n), np.zeros(n, dtype=np.int64))
    h, v, valid, fused, replaced, discarded = _fuse_one(
        float(cell.height), float(cell.variance), bool(cell.valid), cm, cv, float(gate), *scratch
    )
    return Cell(h, v, valid, cell.last_update), (fused, replaced, discarded)


def mahalanobis_fuse(cell: Cell, candidates, gate: float = DEFAULT_GATE) -> Cell:
    """Gate ``candidates`` against ``cell`` and fuse, keeping the highest outlier.

    The result does not depend on the order of ``candidates``.
    """
    return mahalanobis_fuse_stats(cell, candidates, gate)[0]


@njit(cache=True)
def fuse_groups(height, variance, valid, last_update, sx, sy, starts, means, vars_, gate, frame):
    """Apply :func:`_fuse_one` to each group ``means[starts[g]:starts[g+1]]``.

    Group ``g`` targets storage cell ``(sx[g], sy[g])``.  Returns counts
    (fused, replaced, discarded, initialised cells).
    """
    n = means.shape[0]
    cl_m = np.empty(n)
    cl_v = np.empty(n)
    cl_n = np.zeros(n, dtype=np.int64)
    fused = 0
    replaced = 0
    discarded = 0
    initialised = 0
    for g in range(sx.shape[0]):
        a = starts[g]
        b = starts[g + 1]
        i = sx[g]
        j = sy[g]
        was_valid = valid[i, j]
        h, v, ok, f, r, d = _fuse_one(
            height[i, j], variance[i, j], was_valid, means[a:b], vars_[a:b], gate, cl_m, cl_v, cl_n
        )
        height[i, j] = h
        variance[i, j] = v
        valid[i, j] = ok
        last_update[i, j] = frame
        if not was_valid:
            initialised += 1
        fused += f
        replaced += r
        discarded += d
    return fused, replaced, discarded, initialised
