import math

import numpy as np
import pytest
from scipy import stats

from canopymap.geometry import FrameTree, Pose, Rotation
from canopymap.sim import (
    InvalidSpec,
    NoiseModel,
    Obstacle,
    PointCloud,
    SensorRig,
    TerrainSpec,
    UGVState,
    generate_canopy,
    psd_increment,
    simulate_depth_frame,
    step_ugv,
)
from canopymap.sim.sensor import NADIR

SMALL = dict(length=6.0, width=4.0, origin=(-1.0, -2.0))


def flat_field(h=1.0, **kw):
    spec = TerrainSpec(male_height=h, female_height=h, noise_amplitude=0.0, **{**SMALL, **kw})
    return generate_canopy(spec, 0)


def nadir_pose(x, y, z):
    return Pose([x, y, z], NADIR)


# --- terrain ---------------------------------------------------------------

def test_flat_spec_gives_constant_field():
    assert np.all(flat_field(1.0).heights == 1.0)


def test_male_bands_are_three_cells_wide():
    f = generate_canopy(TerrainSpec(**SMALL), 5)
    col = f.male_mask[0].astype(int)
    edges = np.flatnonzero(np.diff(np.r_[0, col, 0]))
    widths = edges[1::2] - edges[::2]
    assert len(widths) >= 2
    assert np.all(widths == 3)


def test_band_spacing_matches_row_geometry():
    spec = TerrainSpec(**SMALL)
    f = generate_canopy(spec, 5)
    starts = np.flatnonzero(np.diff(f.male_mask[0].astype(int)) == 1) + 1
    assert np.all(np.diff(starts) == 153)


def test_seed_determinism():
    spec = TerrainSpec(**SMALL)
    a, b, c = generate_canopy(spec, 42), generate_canopy(spec, 42), generate_canopy(spec, 43)
    assert np.array_equal(a.heights, b.heights)
    assert not np.array_equal(a.heights, c.heights)


def test_large_seed_accepted():
    generate_canopy(TerrainSpec(**SMALL), 2**64 - 1)


def test_heights_within_bounds():
    spec = TerrainSpec(**SMALL)
    f = generate_canopy(spec, 3)
    assert f.heights.min() >= 0.0
    assert f.heights.max() <= spec.peak_height


def test_resolution_coarser_than_male_row_rejected():
    with pytest.raises(InvalidSpec):
        generate_canopy(TerrainSpec(resolution=0.05, **SMALL), 0)


def test_male_rows_stand_above_female_rows():
    spec = TerrainSpec(**SMALL)
    f = generate_canopy(spec, 9)
    gap = f.heights[f.male_mask].mean() - f.heights[~f.male_mask].mean()
    assert gap == pytest.approx(spec.gap, abs=0.01)


def test_obstacles_are_not_part_of_truth():
    spec = TerrainSpec(obstacles=(Obstacle(1.0, 0.0, 0.1, 0.1, 2.0, 0.0, 5.0),), **SMALL)
    f = generate_canopy(spec, 1)
    assert f.heights.max() < 2.0
    assert f.with_obstacles(1.0).max() == 2.0
    assert f.with_obstacles(6.0) is f.heights


# --- depth sensor ----------------------------------------------------------

def test_flat_field_depth_is_exact():
    f = flat_field(1.0)
    rig = SensorRig(stride=16)
    cloud = simulate_depth_frame(f, nadir_pose(2.0, 0.0, 2.5), rig, NoiseModel.noiseless(), 0)
    assert len(cloud) == len(rig.pixel_rays())
    np.testing.assert_allclose(cloud.points[:, 2], 1.5, atol=1e-9)


def test_depth_sigma_carried_in_covariance():
    f = flat_field(0.5)
    noise = NoiseModel(perturb=False)
    cloud = simulate_depth_frame(f, nadir_pose(2.0, 0.0, 2.5), SensorRig(stride=32), noise, 0)
    assert noise.sigma_z(2.0) == pytest.approx(0.0086, abs=1e-12)
    np.testing.assert_allclose(np.sqrt(cloud.covariances[:, 2, 2]), 0.0086, rtol=1e-9)
    np.testing.assert_allclose(np.sqrt(cloud.covariances[:, 0, 0]), 0.002, rtol=1e-9)


def test_zero_max_range_gives_empty_frame():
    rig = SensorRig(max_range=0.0)
    cloud = simulate_depth_frame(flat_field(), nadir_pose(2, 0, 2), rig, NoiseModel(), 0)
    assert len(cloud) == 0


def test_points_beyond_max_range_dropped():
    rig = SensorRig(stride=16, max_range=1.2)
    cloud = simulate_depth_frame(flat_field(1.0), nadir_pose(2, 0, 2.5), rig,
                                 NoiseModel.noiseless(), 0)
    assert len(cloud) == 0


def _on_surface(field, p, tol=1e-6):
    """True where p lies on a column top or on a vertical column face."""
    h = field.height_at(p[:, 0], p[:, 1])
    top = np.abs(p[:, 2] - h) < tol
    res = field.resolution
    fx = (p[:, 0] - field.origin[0]) / res
    fy = (p[:, 1] - field.origin[1]) / res
    on_x = np.abs(fx - np.round(fx)) * res < tol
    on_y = np.abs(fy - np.round(fy)) * res < tol
    lo = np.minimum.reduce([field.height_at(p[:, 0] + dx, p[:, 1] + dy)
                            for dx in (-2 * tol, 2 * tol) for dy in (-2 * tol, 2 * tol)])
    hi = np.maximum.reduce([field.height_at(p[:, 0] + dx, p[:, 1] + dy)
                            for dx in (-2 * tol, 2 * tol) for dy in (-2 * tol, 2 * tol)])
    face = (on_x | on_y) & (p[:, 2] >= lo - tol) & (p[:, 2] <= hi + tol)
    return top | face


def test_noiseless_points_lie_on_heightfield():
    f = generate_canopy(TerrainSpec(**SMALL), 4)
    rig = SensorRig.three_camera()
    ft = FrameTree(rig.mounts)
    robot = Pose.from_xyz_ypr([2.0, 0.1, 0.0], 0.2)
    for i, name in enumerate(ft.mounts):
        pose = ft.sensor_in_map(robot, name)
        cloud = simulate_depth_frame(f, pose, rig, NoiseModel.noiseless(), 0, sensor_id=i)
        assert len(cloud) > 1000
        p = pose.transform(cloud.points)
        assert _on_surface(f, p).all()


def test_frames_are_deterministic_per_seed():
    f = generate_canopy(TerrainSpec(**SMALL), 4)
    rig = SensorRig(stride=16)
    a = simulate_depth_frame(f, nadir_pose(2, 0, 2), rig, NoiseModel(), [1, 2])
    b = simulate_depth_frame(f, nadir_pose(2, 0, 2), rig, NoiseModel(), [1, 2])
    c = simulate_depth_frame(f, nadir_pose(2, 0, 2), rig, NoiseModel(), [1, 3])
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)


def test_depth_noise_matches_model():
    f = flat_field(0.5)
    rig = SensorRig(stride=4)
    cloud = simulate_depth_frame(f, nadir_pose(2.0, 0.0, 2.5), rig, NoiseModel(), 7)
    z = cloud.points[:, 2]
    assert np.std(z - 2.0) == pytest.approx(NoiseModel().sigma_z(2.0), rel=0.05)


def test_three_camera_rig_tilts():
    rig = SensorRig.three_camera(tilt=math.radians(30))
    down = np.array([0, 0, 1.0])
    angles = {k: math.degrees(math.acos(-(m.rotation.apply(down))[2]))
              for k, m in rig.mounts.items()}
    assert angles["nadir"] == pytest.approx(0.0, abs=1e-9)
    assert angles["left"] == pytest.approx(30.0)
    assert angles["right"] == pytest.approx(30.0)
    # side cameras look outward
    assert rig.mounts["left"].rotation.apply(down)[1] > 0
    assert rig.mounts["right"].rotation.apply(down)[1] < 0


def test_tilt_outside_stent_range_rejected():
    with pytest.raises(ValueError):
        SensorRig.three_camera(tilt=math.radians(95))


def test_negative_noise_rejected():
    with pytest.raises(ValueError):
        NoiseModel(depth_a=-0.1)


def test_point_cloud_concatenate_keeps_ids():
    a = PointCloud(np.zeros((2, 3)), np.zeros((2, 3, 3)), np.array([0, 0]))
    b = PointCloud(np.ones((1, 3)), np.zeros((1, 3, 3)), np.array([2]))
    c = PointCloud.concatenate([a, PointCloud.empty(), b])
    assert list(c.sensor_ids) == [0, 0, 2]


# --- vehicle ---------------------------------------------------------------

def test_noiseless_estimate_equals_truth():
    st = UGVState.at(0, 0, 0.3)
    for k in range(50):
        st = step_ugv(st, (1.0, 0.2), 0.1, NoiseModel.noiseless(), k)
    np.testing.assert_array_equal(st.est_pose.translation, st.true_pose.translation)
    np.testing.assert_array_equal(st.est_pose.rotation.quat, st.true_pose.rotation.quat)


def test_straight_run_advances_ten_metres():
    st = UGVState.at()
    for k in range(100):
        st = step_ugv(st, (1.0, 0.0), 0.1, NoiseModel.noiseless(), k)
    np.testing.assert_allclose(st.true_pose.translation, [10.0, 0.0, 0.0], atol=1e-12)
    assert st.timestamp == pytest.approx(10.0)
    assert st.odometer == pytest.approx(10.0)


def test_arc_matches_closed_form():
    st = UGVState.at()
    for k in range(10):
        st = step_ugv(st, (1.0, 0.5), 0.1, NoiseModel.noiseless(), k)
    r = 2.0
    np.testing.assert_allclose(st.true_pose.translation[:2], [r * math.sin(0.5), r * (1 - math.cos(0.5))],
                               atol=1e-12)
    assert st.true_pose.yaw == pytest.approx(0.5)


def test_wheel_speeds_follow_wheelbase():
    st = step_ugv(UGVState.at(), (1.0, 0.4), 0.1, NoiseModel.noiseless(), 0)
    left, right = st.wheel_speeds
    assert right - left == pytest.approx(0.4 * 1.5)


def test_dt_must_be_positive():
    with pytest.raises(ValueError):
        step_ugv(UGVState.at(), (1.0, 0.0), 0.0, NoiseModel(), 0)


def _drift_runs(n_seeds, steps=100):
    errs, covs = [], []
    for s in range(n_seeds):
        st = UGVState.at()
        for k in range(steps):
            st = step_ugv(st, (1.0, 0.0), 0.1, NoiseModel(), [s, k])
        errs.append(st.est_xy_yaw - st.true_xy_yaw)
        covs.append(st.error_cov[:3, :3])
    return np.array(errs), np.array(covs)


def test_drift_matches_propagated_covariance():
    errs, covs = _drift_runs(1000)
    predicted = np.sqrt(np.diag(covs.mean(axis=0)))
    np.testing.assert_allclose(errs.std(axis=0)[:2], predicted[:2], rtol=0.10)


def test_drift_nees_within_chi_square_band():
    errs, covs = _drift_runs(500)
    nees = np.einsum("ni,ni->n", errs, np.linalg.solve(covs, errs[..., None])[..., 0])
    n, dof = len(nees), 3
    lo, hi = stats.chi2.ppf([0.025, 0.975], n * dof) / n
    assert lo <= nees.mean() <= hi


def test_position_variance_grows_linearly_with_distance():
    noise = NoiseModel(acc_w=0.0, gyr_w=0.0, gyr_n=0.0)
    st = UGVState.at()
    var = []
    for k in range(200):
        st = step_ugv(st, (1.0, 0.0), 0.1, noise, k)
        var.append(st.error_cov[0, 0])
    var = np.array(var)
    np.testing.assert_allclose(var[99] * 2, var[199], rtol=1e-9)


def test_covariance_trace_nondecreasing():
    st = UGVState.at()
    prev = 0.0
    for k in range(100):
        st = step_ugv(st, (1.0, 0.1), 0.1, NoiseModel(), k)
        tr = np.trace(st.est_pose.covariance)
        assert tr >= prev - 1e-15
        prev = tr


def test_pose_covariance_block_layout():
    st = UGVState.at()
    for k in range(20):
        st = step_ugv(st, (1.0, 0.0), 0.1, NoiseModel(), k)
    C = st.est_pose.covariance
    assert C[2, 2] == 0.0 and C[3, 3] == 0.0 and C[4, 4] == 0.0
    assert C[5, 5] == pytest.approx(st.error_cov[2, 2])


def test_with_estimate_keeps_covariance_psd():
    st = UGVState.at()
    for k in range(50):
        st = step_ugv(st, (1.0, 0.05), 0.1, NoiseModel(), k)
    cov = st.est_pose.covariance.copy()
    cov[:2, :] = 0.0
    cov[:, :2] = 0.0
    cov[0, 0] = cov[1, 1] = 1e-4
    st2 = st.with_estimate(Pose(st.est_pose.translation + 0.1, st.est_pose.rotation, cov))
    assert np.linalg.eigvalsh(st2.error_cov).min() >= -1e-15
    assert st2.error_cov[0, 0] == pytest.approx(1e-4)


def test_psd_increment_clips_negative_directions():
    a = np.diag([1.0, 2.0])
    b = np.diag([3.0, 1.0])
    np.testing.assert_allclose(psd_increment(a, b), np.diag([2.0, 0.0]), atol=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.normal(size=(2, 6, 6))
        d = psd_increment(x @ x.T, y @ y.T)
        assert np.linalg.eigvalsh(d).min() >= -1e-12


def test_rotation_helper_is_nadir():
    down = NADIR.apply([0, 0, 1.0])
    np.testing.assert_allclose(down, [0, 0, -1.0], atol=1e-15)
    assert isinstance(NADIR, Rotation)
