"""Scenario-driven runs, their evaluation and map export."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .evaluation import (
    PathTooShort,
    Trajectory,
    absolute_pose_error,
    map_rmse,
    relative_pose_error,
)
from .fusion import (
    ALIGN_SCORE_MAX,
    FusedMap,
    InsufficientOverlap,
    align_local_to_global,
    apply_alignment,
    fuse_map,
    surface_features,
)
from .geometry import FrameTree
from .mapping import MIN_VARIANCE, ElevationMap, GridPatch, IngestStats
from .mapping import ingest_point_cloud, propagate_motion_uncertainty, recenter_map
from .scenario import Scenario, load_scenario
from .sim import PointCloud, UGVState, generate_canopy, psd_increment, simulate_depth_frame, step_ugv

RAW_MAP = "raw_map.csv"
FUSED_MAP = "fused_map.csv"
TRAJ_EST = "traj_est.txt"
TRAJ_GT = "traj_gt.txt"
STATS = "ingest_stats.csv"
MANIFEST = "manifest.json"
SCENARIO_COPY = "scenario.ini"
METRICS = "metrics.csv"
SUMMARY = "summary.txt"

ARTIFACTS = (RAW_MAP, FUSED_MAP, TRAJ_EST, TRAJ_GT, STATS, SCENARIO_COPY, MANIFEST)

LAYERS = ("raw", "fused", "lower", "upper", "variance", "gradient", "curvature")
FORMATS = ("csv", "pgm")


class MissingArtifact(FileNotFoundError):
    def __init__(self, name: str, run_dir):
        self.name = name
        super().__init__(f"missing artifact {name!r} in {run_dir}")


class UnknownLayer(ValueError):
    pass


@dataclass
class FrameRecord:
    frame: int
    timestamp: float
    stats: IngestStats
    valid_cells: int
    mean_variance: float
    align_offset: tuple[int, int] | None = None
    align_score: float | None = None
    align_error: str | None = None


@dataclass
class RunArtifacts:
    scenario: Scenario
    raw: GridPatch
    fused: FusedMap
    traj_est: Trajectory
    traj_gt: Trajectory
    records: list[FrameRecord]
    frame_times: np.ndarray
    out_dir: Path | None = None
    files: dict = field(default_factory=dict)


def prior_reference_map(truth, resolution: float, noise_sigma: float, seed: int) -> GridPatch:
    """Pre-existing global map: per-cell canopy top of the truth field plus noise.

    Each map cell holds the highest truth column inside it, the value a
    highest-surface elevation map converges to.  Its variance is the survey
    noise plus the spread of truth heights inside the cell, so cells cut by a
    row edge (whose observed top depends on viewpoint) carry little weight.
    """
    xs, ys = truth.cell_centers()
    kx = np.floor(xs / resolution).astype(np.int64)
    ky = np.floor(ys / resolution).astype(np.int64)
    ox, oy = int(kx.min()), int(ky.min())
    ni, nj = int(kx.max()) - ox + 1, int(ky.max()) - oy + 1
    # block reductions over runs of equal map index along x, then y
    bx = np.flatnonzero(np.r_[True, np.diff(kx) != 0])
    by = np.flatnonzero(np.r_[True, np.diff(ky) != 0])
    nx = np.diff(np.r_[bx, len(kx)])
    ny = np.diff(np.r_[by, len(ky)])
    h = truth.heights

    def block_sum(a):
        return np.add.reduceat(np.add.reduceat(a, bx, axis=0), by, axis=1)

    count = nx[:, None] * ny[None, :]
    mean = block_sum(h) / count
    spread = np.maximum(block_sum(h * h) / count - mean * mean, 0.0)
    top = np.full((ni, nj), np.nan)
    var = np.full((ni, nj), np.nan)
    idx = np.ix_(kx[bx] - ox, ky[by] - oy)
    top[idx] = np.maximum.reduceat(np.maximum.reduceat(h, bx, axis=0), by, axis=1)
    var[idx] = np.maximum(noise_sigma**2 + spread, MIN_VARIANCE)
    valid = np.isfinite(top)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(top.shape) * noise_sigma
    return GridPatch(np.where(valid, top + noise, np.nan), var, valid, (ox, oy), resolution)


def _crop_valid(p: GridPatch) -> GridPatch:
    ii = np.flatnonzero(p.valid.any(axis=1))
    jj = np.flatnonzero(p.valid.any(axis=0))
    if ii.size == 0:
        return p
    return p.crop(int(ii[0]), int(jj[0]), int(ii[-1] - ii[0] + 1), int(jj[-1] - jj[0] + 1))


def _fuse(emap: ElevationMap, sc: Scenario) -> FusedMap | None:
    if not emap.valid.any():
        return None
    return surface_features(fuse_map(emap, sc.map.kernel_sigma, sc.map.edge_gate))


def simulate(sc: Scenario, on_frame=None) -> RunArtifacts:
    """Run the closed loop in memory.

    Per frame: advance the vehicle, render the three cameras from the true
    pose, fuse into the map at the estimated pose and inflate the map by the
    pose-uncertainty increment.  Every ``fusion_every`` frames the window is
    recentred, the fused product is rebuilt and, when enabled, the map since
    the previous alignment is matched against the prior reference map to
    correct the pose estimate.

    ``on_frame(record, state, emap, fused)`` is called after every frame.
    """
    truth = generate_canopy(sc.terrain, sc.seeds.terrain)
    rig = sc.rig
    frames = FrameTree(rig.mounts)
    mp = sc.map
    x0, y0, yaw0 = sc.start
    state = UGVState.at(x0, y0, yaw0)
    emap = ElevationMap.create(mp.side_length, mp.resolution, (x0, y0), gate=mp.gate)
    local = ElevationMap.create(mp.side_length, mp.resolution, (x0, y0), gate=mp.gate)
    prior = (prior_reference_map(truth, mp.resolution, mp.prior_noise, sc.seeds.prior)
             if mp.align else None)

    dt = sc.dt
    gt_samples = [(0.0, state.true_pose)]
    est_samples = [(0.0, state.est_pose)]
    records: list[FrameRecord] = []
    frame_times = np.zeros(sc.n_frames)
    fused = None
    hf_key, hf = None, truth.heights

    # one untimed scratch frame so compiled kernels are loaded before timing starts
    scratch = ElevationMap.create(mp.side_length, mp.resolution, (x0, y0), gate=mp.gate)
    ingest_point_cloud(scratch, PointCloud.concatenate(
        simulate_depth_frame(truth, frames.sensor_in_map(state.true_pose, name), rig, sc.noise,
                             [sc.seeds.sensor, 0, i], sensor_id=i)
        for i, name in enumerate(frames.mounts)), state.est_pose, frames)

    for k in range(1, sc.n_frames + 1):
        t_prev = (k - 1) * dt
        tic = time.perf_counter()
        cov_before = state.est_pose.covariance
        state = step_ugv(state, sc.command_at(t_prev), dt, sc.noise, [sc.seeds.drift, k])
        t = k * dt

        key = tuple(o.active(t) for o in sc.terrain.obstacles)
        if key != hf_key:
            hf_key, hf = key, truth.with_obstacles(t)
        clouds = [
            simulate_depth_frame(truth, frames.sensor_in_map(state.true_pose, name), rig, sc.noise,
                                 [sc.seeds.sensor, k, i], heights=hf, sensor_id=i)
            for i, name in enumerate(frames.mounts)
        ]
        cloud = PointCloud.concatenate(clouds)
        emap, stats = ingest_point_cloud(emap, cloud, state.est_pose, frames)
        delta = psd_increment(cov_before, state.est_pose.covariance)
        propagate_motion_uncertainty(emap, delta, state.est_pose)
        frame_times[k - 1] = time.perf_counter() - tic

        if prior is not None:
            recenter_map(local, state.est_pose.translation[:2])
            ingest_point_cloud(local, cloud, state.est_pose, frames)

        rec = FrameRecord(k, t, stats, emap.valid_count(), 0.0)
        if k % mp.fusion_every == 0 or k == sc.n_frames:
            recenter_map(emap, state.est_pose.translation[:2])
            if prior is not None:
                try:
                    off, score = align_local_to_global(_crop_valid(local.snapshot()), prior,
                                                       mp.align_radius)
                    rec.align_offset = (int(off[0]), int(off[1]))
                    rec.align_score = score
                    if off.any() and score <= ALIGN_SCORE_MAX:
                        state = state.with_estimate(
                            apply_alignment(state.est_pose, off, mp.resolution))
                        emap.shift_content(-int(off[0]), -int(off[1]))
                        recenter_map(emap, state.est_pose.translation[:2])
                except InsufficientOverlap as e:
                    rec.align_error = str(e)
                local = ElevationMap.create(mp.side_length, mp.resolution,
                                            tuple(state.est_pose.translation[:2]), gate=mp.gate)
            fused = _fuse(emap, sc)
        rec.valid_cells = emap.valid_count()
        rec.mean_variance = float(np.mean(emap.variance[emap.valid])) if rec.valid_cells else math.nan
        records.append(rec)
        gt_samples.append((t, state.true_pose))
        est_samples.append((t, state.est_pose))
        if on_frame is not None:
            on_frame(rec, state, emap, fused)

    if fused is None:
        fused = _fuse(emap, sc)
    return RunArtifacts(
        scenario=sc,
        raw=emap.snapshot(),
        fused=fused,
        traj_est=Trajectory.from_poses(est_samples),
        traj_gt=Trajectory.from_poses(gt_samples),
        records=records,
        frame_times=frame_times,
    )


STATS_HEADER = ["frame", "timestamp", "points", "fused", "replaced", "discarded", "out_of_bounds",
                "cells_touched", "cells_initialised", "valid_cells", "mean_variance",
                "align_dx", "align_dy", "align_score"]


def _write_stats(path: Path, records) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_HEADER)
        for r in records:
            s = r.stats
            off = r.align_offset
            w.writerow([
                r.frame, f"{r.timestamp:.6f}", s.points, s.fused, s.replaced, s.discarded,
                s.out_of_bounds, s.cells_touched, s.cells_initialised, r.valid_cells,
                "nan" if not math.isfinite(r.mean_variance) else f"{r.mean_variance:.9e}",
                "" if off is None else off[0], "" if off is None else off[1],
                "" if r.align_score is None else f"{r.align_score:.9e}",
            ])


def write_artifacts(run: RunArtifacts, out_dir) -> RunArtifacts:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = run.scenario
    files = {
        RAW_MAP: io.write_raw_map_csv(out / RAW_MAP, run.raw),
        FUSED_MAP: io.write_fused_map_csv(out / FUSED_MAP, run.fused),
        TRAJ_EST: io.write_trajectory(out / TRAJ_EST, run.traj_est),
        TRAJ_GT: io.write_trajectory(out / TRAJ_GT, run.traj_gt),
    }
    _write_stats(out / STATS, run.records)
    files[STATS] = out / STATS
    (out / SCENARIO_COPY).write_text(sc.source, encoding="utf-8")
    files[SCENARIO_COPY] = out / SCENARIO_COPY
    manifest = {
        "scenario": sc.name,
        "config_sha256": sc.config_hash,
        "seeds": {"terrain": sc.seeds.terrain, "sensor": sc.seeds.sensor,
                  "drift": sc.seeds.drift, "prior": sc.seeds.prior},
        "frames": sc.n_frames,
        "frame_rate": sc.frame_rate,
        "map_resolution": sc.map.resolution,
        "align": sc.map.align,
        "artifacts": sorted(f for f in files),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                encoding="ascii")
    files[MANIFEST] = out / MANIFEST
    run.out_dir = out
    run.files = files
    return run


def run_scenario(scenario, out_base=".", overrides: dict | None = None, on_frame=None) -> RunArtifacts:
    """Load, simulate and write a run to ``<out_base>/<scenario output>``."""
    sc = scenario if isinstance(scenario, Scenario) else load_scenario(scenario, overrides)
    run = simulate(sc, on_frame=on_frame)
    return write_artifacts(run, Path(out_base) / sc.output)


def _require(run_dir: Path, *names):
    for name in names:
        if not (run_dir / name).is_file():
            raise MissingArtifact(name, run_dir)


def _patch_from_csv(path: Path, resolution: float) -> GridPatch:
    xs, ys, cols = io.read_grid_csv(path)
    origin = (int(round(xs[0] / resolution - 0.5)), int(round(ys[0] / resolution - 0.5)))
    if "valid" in cols:
        valid = cols["valid"] > 0.5
        var = cols["variance"]
    else:
        valid = np.isfinite(cols["height"])
        var = np.square((cols["upper"] - cols["height"]) / 1.96)
    return GridPatch(cols["height"], var, valid, origin, resolution)


def eval_run(run_dir, delta: float = 1.0) -> dict:
    """Compute APE, RPE(delta) and map RMSE/coverage; writes metrics.csv and summary.txt."""
    run_dir = Path(run_dir)
    _require(run_dir, SCENARIO_COPY, TRAJ_EST, TRAJ_GT, RAW_MAP, FUSED_MAP)
    sc = load_scenario(run_dir / SCENARIO_COPY)
    truth = generate_canopy(sc.terrain, sc.seeds.terrain)
    est = io.read_trajectory(run_dir / TRAJ_EST)
    gt = io.read_trajectory(run_dir / TRAJ_GT)
    ape, _ = absolute_pose_error(est, gt)
    try:
        rpe_t, rpe_r = relative_pose_error(est, gt, delta)
    except PathTooShort:
        rpe_t = rpe_r = math.nan
    raw = _patch_from_csv(run_dir / RAW_MAP, sc.map.resolution)
    fused = _patch_from_csv(run_dir / FUSED_MAP, sc.map.resolution)
    raw_rmse, raw_cov = map_rmse(raw, truth)
    fused_rmse, fused_cov = map_rmse(fused, truth)
    metrics = {
        "ape_rmse_m": ape,
        "rpe_trans_rmse_m": rpe_t,
        "rpe_rot_rmse_rad": rpe_r,
        "rpe_delta_m": float(delta),
        "raw_map_rmse_m": raw_rmse,
        "raw_map_coverage": raw_cov,
        "fused_map_rmse_m": fused_rmse,
        "fused_map_coverage": fused_cov,
    }
    with open(run_dir / METRICS, "w", encoding="ascii", newline="\n") as fh:
        fh.write("metric,value\n")
        for k, v in metrics.items():
            fh.write(f"{k},{v:.9e}\n")
    lines = [
        f"run: {sc.name} ({len(gt)} poses, {gt.arc_length()[-1]:.2f} m)",
        f"APE RMSE: {ape:.4f} m",
        f"RPE over {delta:g} m: {rpe_t:.4f} m, {math.degrees(rpe_r):.4f} deg",
        f"raw map: RMSE {raw_rmse:.4f} m, coverage {100 * raw_cov:.1f}%",
        f"fused map: RMSE {fused_rmse:.4f} m, coverage {100 * fused_cov:.1f}%",
    ]
    (run_dir / SUMMARY).write_text("\n".join(lines) + "\n", encoding="ascii")
    return metrics


_LAYER_COLUMNS = {
    "raw": (RAW_MAP, ["height", "variance", "valid"], "height"),
    "variance": (RAW_MAP, ["variance"], "variance"),
    "fused": (FUSED_MAP, ["height", "lower", "upper"], "height"),
    "lower": (FUSED_MAP, ["lower"], "lower"),
    "upper": (FUSED_MAP, ["upper"], "upper"),
    "gradient": (FUSED_MAP, ["grad_x", "grad_y"], "gradient"),
    "curvature": (FUSED_MAP, ["curvature"], "curvature"),
}


def export_map(run_dir, layer: str, fmt: str, value_range=None, out_path=None) -> Path:
    """Export one map layer of a run as CSV or 16-bit PGM.

    The default destination is ``<run_dir>/export/<layer>.<fmt>``.  PGM
    renders the gradient layer as its magnitude.
    """
    if layer not in LAYERS:
        raise UnknownLayer(f"unknown layer {layer!r}; choose from {', '.join(LAYERS)}")
    if fmt not in FORMATS:
        raise UnknownLayer(f"unknown format {fmt!r}; choose from {', '.join(FORMATS)}")
    run_dir = Path(run_dir)
    source, columns, image = _LAYER_COLUMNS[layer]
    _require(run_dir, source)
    xs, ys, cols = io.read_grid_csv(run_dir / source)
    valid = cols["valid"] > 0.5 if "valid" in cols else np.isfinite(cols["height"])
    dest = Path(out_path) if out_path else run_dir / "export" / f"{layer}.{fmt}"
    dest.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        layers = [valid if c == "valid" else cols[c] for c in columns]
        specs = [None if c == "valid" else ("0.9e" if c in ("variance", "grad_x", "grad_y",
                                                            "curvature") else "0.9f")
                 for c in columns]
        return io.write_grid_csv(dest, xs, ys, ["x", "y", *columns], layers, specs)
    grid = np.hypot(cols["grad_x"], cols["grad_y"]) if image == "gradient" else cols[image]
    return io.write_pgm(dest, grid, valid & np.isfinite(grid), value_range)

