import math

import numpy as np
import pytest

from canopymap.fusion import (
    ALIGN_SCORE_MAX,
    CONFIDENCE_Z,
    EmptyMap,
    InsufficientOverlap,
    align_local_to_global,
    apply_alignment,
    fuse_map,
    kernel_offsets,
    surface_features,
)
from canopymap.geometry import FrameTree, Pose, Rotation
from canopymap.mapping import ElevationMap, GridPatch, ingest_point_cloud
from canopymap.sim import (
    NoiseModel,
    PointCloud,
    SensorRig,
    TerrainSpec,
    generate_canopy,
    simulate_depth_frame,
)


def patch(height, variance=0.04, valid=None, origin=(0, 0), res=0.05):
    h = np.asarray(height, dtype=float)
    v = np.broadcast_to(np.asarray(variance, dtype=float), h.shape).copy()
    ok = np.ones(h.shape, bool) if valid is None else np.asarray(valid, bool)
    return GridPatch(np.where(ok, h, np.nan), np.where(ok, v, np.nan), ok, origin, res)


def total_variation(h):
    return np.nansum(np.abs(np.diff(h, axis=0))) + np.nansum(np.abs(np.diff(h, axis=1)))


def textured_global(seed=0, n=80, res=0.05):
    """Block-max of a seeded canopy field: structured in both axes."""
    spec = TerrainSpec(length=n * res, width=n * res, origin=(0.0, 0.0))
    field = generate_canopy(spec, seed)
    f = int(round(res / spec.resolution))
    h = field.heights[: n * f, : n * f].reshape(n, f, n, f).max(axis=(1, 3))
    return patch(h, 1e-4, res=res)


# --- fuse_map --------------------------------------------------------------

def test_kernel_zero_returns_raw():
    rng = np.random.default_rng(0)
    valid = rng.random((20, 20)) > 0.3
    p = patch(rng.normal(size=(20, 20)), rng.uniform(0.01, 0.1, (20, 20)), valid)
    f = fuse_map(p, 0)
    np.testing.assert_array_equal(f.valid, p.valid)
    np.testing.assert_array_equal(f.height[valid], p.height[valid])
    np.testing.assert_allclose(f.sigma[valid], np.sqrt(p.variance[valid]), rtol=1e-15)


def test_uniform_map_closed_form_bounds():
    f = fuse_map(patch(np.ones((30, 30)), 0.04), 1.0)
    np.testing.assert_allclose(f.height, 1.0, atol=1e-12)
    g = np.array([w for _, _, w in kernel_offsets(1.0)])
    n_eff = g.sum() ** 2 / (g * g).sum()
    expect = CONFIDENCE_Z * 0.2 / math.sqrt(n_eff)
    interior = (slice(2, -2), slice(2, -2))
    np.testing.assert_allclose(f.upper[interior] - 1.0, expect, rtol=1e-12)
    np.testing.assert_allclose(1.0 - f.lower[interior], expect, rtol=1e-12)


def test_variance_weighted_spike_is_suppressed():
    h = np.ones((15, 15))
    v = np.full((15, 15), 1e-4)
    h[7, 7], v[7, 7] = 2.0, 1.0
    f = fuse_map(patch(h, v), 1.0)
    assert abs(f.height[7, 7] - 1.0) <= 0.1


def test_bounds_bracket_height():
    rng = np.random.default_rng(1)
    valid = rng.random((25, 25)) > 0.2
    f = fuse_map(patch(rng.normal(size=(25, 25)), rng.uniform(1e-4, 0.1, (25, 25)), valid), 2.0)
    ok = f.valid
    assert np.all(f.lower[ok] <= f.height[ok]) and np.all(f.height[ok] <= f.upper[ok])


def seeded_raw_map(seed):
    """One three-camera frame over a seeded noisy canopy, perfect pose."""
    field = generate_canopy(TerrainSpec(length=6, width=6, origin=(-3, -3)), seed)
    rig = SensorRig.three_camera()
    frames = FrameTree(rig.mounts)
    clouds = [simulate_depth_frame(field, mount, rig, NoiseModel(), [seed, i], sensor_id=i)
              for i, mount in enumerate(rig.mounts.values())]
    emap = ElevationMap.create(5.0, 0.05)
    ingest_point_cloud(emap, PointCloud.concatenate(clouds), Pose(), frames)
    return emap.snapshot()


@pytest.mark.parametrize("seed", range(5))
def test_total_variation_nonincreasing_in_kernel_sigma(seed):
    p = seeded_raw_map(seed)
    # measured on the raw support so filled cells do not add terms
    tv = [total_variation(np.where(p.valid, fuse_map(p, s).height, np.nan)) for s in (0, 1, 2, 4)]
    assert all(b <= a for a, b in zip(tv, tv[1:])), tv


def test_invalid_cell_filled_from_three_neighbours():
    valid = np.ones((9, 9), bool)
    valid[4, 4] = False
    f = fuse_map(patch(np.ones((9, 9)), 0.01, valid), 1.0)
    assert f.valid[4, 4] and f.height[4, 4] == pytest.approx(1.0)
    lonely = np.zeros((9, 9), bool)
    lonely[0, 0] = lonely[8, 8] = True
    f = fuse_map(patch(np.ones((9, 9)), 0.01, lonely), 1.0)
    assert f.valid.sum() == 2


def test_edge_is_smoothed_without_gate():
    h = np.where(np.arange(20)[None, :] < 10, 0.9, 1.1) * np.ones((20, 1))
    f = fuse_map(patch(h, 1e-6), 2.0)
    assert 0.9 < f.height[5, 9] < 1.0 < f.height[5, 10] < 1.1


def test_edge_is_preserved_by_gate():
    h = np.where(np.arange(20)[None, :] < 10, 0.9, 1.1) * np.ones((20, 1))
    f = fuse_map(patch(h, 1e-6), 2.0, gate=3.0)
    np.testing.assert_allclose(f.height, h, atol=1e-12)


def test_empty_map_raises():
    with pytest.raises(EmptyMap):
        fuse_map(patch(np.ones((4, 4)), 0.1, np.zeros((4, 4), bool)), 1.0)
    with pytest.raises(EmptyMap):
        fuse_map(ElevationMap.create(1.0, 0.1), 1.0)


def test_negative_kernel_rejected():
    with pytest.raises(ValueError):
        fuse_map(patch(np.ones((3, 3))), -1.0)


# --- surface features ------------------------------------------------------

def grid_xy(n, res):
    c = (np.arange(n) + 0.5) * res
    return np.meshgrid(c, c, indexing="ij")


def features_of(h, res=0.05):
    return surface_features(fuse_map(patch(h, 1e-4, res=res), 0))


def test_flat_features():
    f = features_of(np.full((10, 10), 0.9))
    np.testing.assert_array_equal(f.gradient, 0.0)
    np.testing.assert_array_equal(f.curvature, 0.0)
    np.testing.assert_array_equal(f.normal, np.broadcast_to([0.0, 0.0, 1.0], (10, 10, 3)))


def test_inclined_plane_features():
    X, Y = grid_xy(20, 0.05)
    f = features_of(0.1 * X)
    np.testing.assert_allclose(f.gradient[..., 0], 0.1, atol=1e-9)
    np.testing.assert_allclose(f.gradient[..., 1], 0.0, atol=1e-9)
    expect = np.array([-0.1, 0.0, 1.0]) / math.sqrt(1.01)
    np.testing.assert_allclose(f.normal[1:-1, 1:-1], np.broadcast_to(expect, (18, 18, 3)), atol=1e-9)
    np.testing.assert_allclose(f.curvature, 0.0, atol=1e-9)


def test_paraboloid_curvature():
    res = 0.05
    X, Y = grid_xy(30, res)
    f = features_of(0.25 * ((X - 0.7) ** 2 + (Y - 0.8) ** 2), res)
    np.testing.assert_allclose(f.curvature[1:-1, 1:-1], 1.0, atol=2 * res * res)


def test_normals_are_unit_with_positive_z():
    rng = np.random.default_rng(3)
    f = features_of(rng.normal(size=(15, 15)))
    np.testing.assert_allclose(np.linalg.norm(f.normal, axis=-1), 1.0, atol=1e-9)
    assert np.all(f.normal[..., 2] > 0)


# --- alignment -------------------------------------------------------------

def test_exact_crop_aligns_to_zero():
    G = textured_global()
    off, score = align_local_to_global(G.crop(20, 20, 40, 40), G, 10)
    assert tuple(off) == (0, 0)
    assert score == 0.0


def test_shifted_crop_recovers_opposite_offset():
    G = textured_global(1)
    # local content is global displaced by (+3, -2) cells
    L = G.crop(23, 18, 40, 40)
    L = GridPatch(L.height, L.variance, L.valid, (20, 20), L.resolution)
    off, score = align_local_to_global(L, G, 10)
    assert tuple(off) == (-3, 2)
    assert score < ALIGN_SCORE_MAX


@pytest.mark.parametrize("shift", [(10, 0), (-10, 7), (4, -9), (0, 0)])
def test_noiseless_shifts_within_radius_recovered(shift):
    G = textured_global(2)
    L = G.crop(20 + shift[0], 20 + shift[1], 40, 40)
    L = GridPatch(L.height, L.variance, L.valid, (20, 20), L.resolution)
    off, _ = align_local_to_global(L, G, 10)
    assert tuple(off) == (-shift[0], -shift[1])


def test_pure_noise_local_scores_low_confidence():
    G = textured_global(3)
    scores = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        L = patch(1.0 + 0.02 * rng.standard_normal((40, 40)), 1e-4, origin=(20, 20))
        scores.append(align_local_to_global(L, G, 10)[1])
    assert min(scores) > ALIGN_SCORE_MAX


def test_insufficient_overlap():
    G = textured_global()
    with pytest.raises(InsufficientOverlap):
        align_local_to_global(G.crop(0, 0, 5, 5), G, 3)
    far = GridPatch(G.height, G.variance, G.valid, (500, 500), G.resolution)
    with pytest.raises(InsufficientOverlap):
        align_local_to_global(far, G, 3)


def test_tie_prefers_zero_offset_on_featureless_map():
    G = patch(np.ones((30, 30)), 1e-4)
    off, _ = align_local_to_global(G.crop(5, 5, 20, 20), G, 3)
    assert tuple(off) == (0, 0)


def test_tie_breaks_lexicographically_at_equal_norm():
    # period-2 stripes along x: (-1, 0) and (+1, 0) match equally, (0, 0) does not
    h = np.where(np.arange(30)[:, None] % 2 == 0, 1.0, 0.0) * np.ones((1, 30))
    G = patch(h, 1e-4)
    L = G.crop(6, 5, 20, 20)
    L = GridPatch(L.height, L.variance, L.valid, (5, 5), L.resolution)
    off, _ = align_local_to_global(L, G, 1)
    assert tuple(off) == (-1, 0)


def test_resolution_mismatch_rejected():
    G = textured_global()
    L = GridPatch(G.height, G.variance, G.valid, G.origin, 0.1)
    with pytest.raises(ValueError):
        align_local_to_global(L, G, 2)


def test_apply_null_correction_sets_floor():
    cov = np.eye(6) * 0.3
    pose = Pose([1.0, 2.0, 0.5], Rotation.identity(), cov)
    out = apply_alignment(pose, (0, 0), 0.05)
    np.testing.assert_array_equal(out.translation, pose.translation)
    assert out.covariance[0, 0] == out.covariance[1, 1] == pytest.approx(0.05**2 / 12)
    assert out.covariance[0, 1] == 0.0
    np.testing.assert_array_equal(out.covariance[2:, 2:], cov[2:, 2:])


def test_apply_offset_arithmetic():
    out = apply_alignment(Pose([1.0, 2.0, 0.5]), (-3, 2), 0.05)
    np.testing.assert_allclose(out.translation, [1.15, 1.90, 0.5], atol=1e-12)
