import numpy as np
import pytest

from canopymap.evaluation import Trajectory
from canopymap.fusion import fuse_map, surface_features
from canopymap.geometry import compose_yaw_tilt
from canopymap.io import (
    FUSED_COLUMNS,
    PGM_MAX,
    pgm_bytes,
    read_grid_csv,
    read_pgm,
    read_trajectory,
    write_fused_map_csv,
    write_heightfield_csv,
    write_pgm,
    write_raw_map_csv,
    write_trajectory,
)
from canopymap.mapping import GridPatch
from canopymap.sim import TerrainSpec, generate_canopy


def small_patch():
    h = np.arange(12, dtype=float).reshape(4, 3) * 0.1
    valid = np.ones((4, 3), bool)
    valid[0, 0] = False
    return GridPatch(np.where(valid, h, np.nan), np.where(valid, 0.01, np.nan), valid, (-2, 5), 0.05)


def test_raw_csv_header_and_row_order(tmp_path):
    path = write_raw_map_csv(tmp_path / "raw.csv", small_patch())
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,height,variance,valid"
    assert len(lines) == 13
    assert lines[1] == "-0.075000,0.275000,nan,nan,0"
    # x-major: the second row advances y
    assert lines[2].startswith("-0.075000,0.325000,0.100000000,1.000000000e-02,1")


def test_raw_csv_round_trip(tmp_path):
    p = small_patch()
    xs, ys, cols = read_grid_csv(write_raw_map_csv(tmp_path / "raw.csv", p))
    np.testing.assert_allclose(xs, p.centers()[0])
    np.testing.assert_allclose(ys, p.centers()[1])
    np.testing.assert_array_equal(cols["valid"] > 0.5, p.valid)
    np.testing.assert_allclose(cols["height"][p.valid], p.height[p.valid], atol=1e-9)


def test_fused_csv_columns(tmp_path):
    f = surface_features(fuse_map(small_patch(), 1.0))
    path = write_fused_map_csv(tmp_path / "fused.csv", f)
    assert path.read_text().splitlines()[0] == ",".join(FUSED_COLUMNS)
    _, _, cols = read_grid_csv(path)
    ok = np.isfinite(cols["height"])
    assert np.all(cols["lower"][ok] <= cols["height"][ok])
    assert np.all(cols["height"][ok] <= cols["upper"][ok])


def test_pgm_header_range_and_levels(tmp_path):
    grid = np.array([[0.0, 0.5], [1.0, np.nan]])
    valid = np.array([[True, True], [True, False]])
    path = write_pgm(tmp_path / "m.pgm", grid, valid)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n2 2\n65535\n")
    assert (tmp_path / "m.pgm.range.txt").read_text() == "0.000000000 1.000000000\n"
    img, maxval = read_pgm(path)
    assert maxval == PGM_MAX
    # rows run north (high y) to south; columns run along x
    assert img[1, 0] == 1 and img[0, 0] == 32768
    assert img[1, 1] == PGM_MAX and img[0, 1] == 0


def test_pgm_explicit_range_clips():
    b = pgm_bytes(np.array([[-1.0, 5.0]]), np.ones((1, 2), bool), 0.0, 1.0)
    img = np.frombuffer(b[-4:], dtype=">u2").reshape(2, 1)
    assert img[1, 0] == 1 and img[0, 0] == PGM_MAX


def test_trajectory_round_trip_and_format(tmp_path):
    t = np.array([0.0, 0.1, 0.2])
    pos = np.array([[0, 0, 0], [0.1, 0.0, 0.0], [0.2, 0.01, 0.0]])
    quats = np.array([compose_yaw_tilt(a, 0.0, 0.0).quat for a in (0.0, 0.1, 0.2)])
    traj = Trajectory(t, pos, quats)
    path = write_trajectory(tmp_path / "traj.txt", traj)
    lines = path.read_text().splitlines()
    assert lines[0] == "# timestamp tx ty tz qx qy qz qw"
    assert lines[1] == "0.000000 0.000000000 0.000000000 0.000000000 " \
                       "0.000000000000 0.000000000000 0.000000000000 1.000000000000"
    back = read_trajectory(path)
    np.testing.assert_allclose(back.positions, pos, atol=1e-9)
    np.testing.assert_allclose(back.quaternions, quats, atol=1e-12)


def test_read_trajectory_rejects_short_rows(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("0 1 2 3\n")
    with pytest.raises(ValueError):
        read_trajectory(p)


def test_heightfield_csv(tmp_path):
    field = generate_canopy(TerrainSpec(length=0.1, width=1.6, origin=(0, 0)), 0)
    path = write_heightfield_csv(tmp_path / "hf.csv", field)
    _, _, cols = read_grid_csv(path)
    np.testing.assert_allclose(cols["height"], field.heights, atol=1e-9)
    assert cols["male"].sum() == field.male_mask.sum()


def test_writers_are_byte_deterministic(tmp_path):
    a = write_raw_map_csv(tmp_path / "a.csv", small_patch()).read_bytes()
    b = write_raw_map_csv(tmp_path / "b.csv", small_patch()).read_bytes()
    assert a == b
