"""Synthetic hybrid-rice canopy heightfield.

Rows run along x.  Across y the field alternates wide female bands and
narrow male (pollen-donor) bands; band edges are snapped to whole cells so a
0.030 m male band at 0.01 m resolution is exactly three cells wide.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

MALE_WIDTH = 0.030
FEMALE_WIDTH = 1.500


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class Obstacle:
    """Axis-aligned box standing in the canopy, visible during ``[t_start, t_end)``.

    ``top`` is the absolute elevation of the box top.  Obstacles are
    transient: they are seen by the sensor but are not part of the
    ground-truth canopy.
    """

    x: float
    y: float
    size_x: float
    size_y: float
    top: float
    t_start: float = -math.inf
    t_end: float = math.inf

    def active(self, t: float) -> bool:
        return self.t_start <= t < self.t_end


@dataclass(frozen=True)
class TerrainSpec:
    length: float = 30.0
    width: float = 8.0
    resolution: float = 0.01
    origin: tuple[float, float] = (-5.0, -4.0)
    male_width: float = MALE_WIDTH
    female_width: float = FEMALE_WIDTH
    male_height: float = 1.10
    female_height: float = 0.90
    # y of the lower edge of one male band; 0.75 centres a female band on y = 0
    male_band_start: float = 0.75
    # clump-scale canopy roughness: peak amplitude (m) and correlation length (m)
    noise_amplitude: float = 0.05
    noise_correlation: float = 0.1
    obstacles: tuple[Obstacle, ...] = field(default_factory=tuple)

    @property
    def row_spacing(self) -> float:
        return self.male_width + self.female_width

    @property
    def peak_height(self) -> float:
        return max(self.male_height, self.female_height) + self.noise_amplitude

    @property
    def gap(self) -> float:
        return self.male_height - self.female_height

    def validate(self) -> None:
        if self.length <= 0 or self.width <= 0 or self.resolution <= 0:
            raise InvalidSpec("extent and resolution must be positive")
        if self.resolution > self.male_width:
            raise InvalidSpec(
                f"resolution {self.resolution} m exceeds male plant width {self.male_width} m"
            )
        if self.female_width <= 0:
            raise InvalidSpec("female band width must be positive")
        if min(self.male_height, self.female_height) < 0 or self.noise_amplitude < 0:
            raise InvalidSpec("heights and noise amplitude must be non-negative")
        if self.noise_amplitude > 0 and self.noise_correlation <= 0:
            raise InvalidSpec("noise correlation length must be positive")


@dataclass(frozen=True, eq=False)
class CanopyField:
    """Ground-truth canopy: ``heights[ix, iy]`` is the column over cell (ix, iy)."""

    heights: np.ndarray
    male_mask: np.ndarray
    resolution: float
    origin: tuple[float, float]
    spec: TerrainSpec

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    @property
    def extent(self) -> tuple[float, float]:
        return self.shape[0] * self.resolution, self.shape[1] * self.resolution

    @cached_property
    def height_range(self) -> tuple[float, float]:
        """Bounds on every column height, obstacle tops included."""
        tops = [o.top for o in self.spec.obstacles]
        return float(self.heights.min()), float(max([self.heights.max(), *tops]))

    def cell_index(self, x, y):
        ix = np.floor((np.asarray(x) - self.origin[0]) / self.resolution).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.origin[1]) / self.resolution).astype(np.int64)
        return ix, iy

    def cell_centers(self):
        xs = self.origin[0] + (np.arange(self.shape[0]) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(self.shape[1]) + 0.5) * self.resolution
        return xs, ys

    def height_at(self, x, y):
        """Column height under (x, y); NaN outside the field."""
        ix, iy = self.cell_index(x, y)
        inside = (ix >= 0) & (ix < self.shape[0]) & (iy >= 0) & (iy < self.shape[1])
        out = np.full(np.shape(ix), np.nan)
        out[inside] = self.heights[ix[inside], iy[inside]]
        return out if out.ndim else float(out)

    def band_of(self, y) -> np.ndarray:
        """True where ``y`` falls in a male band."""
        _, iy = self.cell_index(np.zeros_like(np.asarray(y, dtype=float)), y)
        return _male_cells(self.spec, iy)

    def with_obstacles(self, t: float) -> np.ndarray:
        """Heightfield with the obstacles active at time ``t`` stamped in."""
        active = [o for o in self.spec.obstacles if o.active(t)]
        if not active:
            return self.heights
        h = self.heights.copy()
        for o in active:
            ix0, iy0 = self.cell_index(o.x - 0.5 * o.size_x, o.y - 0.5 * o.size_y)
            ix1, iy1 = self.cell_index(o.x + 0.5 * o.size_x, o.y + 0.5 * o.size_y)
            ix0, iy0 = max(int(ix0), 0), max(int(iy0), 0)
            ix1, iy1 = min(int(ix1), self.shape[0]), min(int(iy1), self.shape[1])
            if ix1 > ix0 and iy1 > iy0:
                blk = h[ix0:ix1, iy0:iy1]
                np.maximum(blk, o.top, out=blk)
        return h


def _cells(width: float, resolution: float) -> int:
    return max(1, int(round(width / resolution)))


def _male_cells(spec: TerrainSpec, iy) -> np.ndarray:
    male = _cells(spec.male_width, spec.resolution)
    period = male + _cells(spec.female_width, spec.resolution)
    anchor = int(round((spec.male_band_start - spec.origin[1]) / spec.resolution))
    return np.mod(np.asarray(iy) - anchor, period) < male


def _band_limited_noise(shape, correlation_cells: float, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(shape)
    kx = np.fft.fftfreq(shape[0])
    ky = np.fft.rfftfreq(shape[1])
    # Gaussian low-pass with spatial stdev `correlation_cells`
    s2 = (2.0 * np.pi * correlation_cells) ** 2
    transfer = np.exp(-0.5 * s2 * (kx[:, None] ** 2 + ky[None, :] ** 2))
    smooth = np.fft.irfft2(np.fft.rfft2(white) * transfer, s=shape)
    peak = np.max(np.abs(smooth))
    return smooth / peak if peak > 0 else smooth


def generate_canopy(spec: TerrainSpec, seed: int) -> CanopyField:
    """Build the ground-truth field; bit-identical for identical (spec, seed)."""
    spec.validate()
    nx = int(round(spec.length / spec.resolution))
    ny = int(round(spec.width / spec.resolution))
    iy = np.arange(ny)
    male_row = _male_cells(spec, iy)
    male_mask = np.broadcast_to(male_row, (nx, ny)).copy()
    heights = np.where(male_mask, spec.male_height, spec.female_height).astype(float)
    if spec.noise_amplitude > 0:
        rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
        noise = _band_limited_noise((nx, ny), spec.noise_correlation / spec.resolution, rng)
        heights += spec.noise_amplitude * noise
        np.clip(heights, 0.0, spec.peak_height, out=heights)
    return CanopyField(heights, male_mask, spec.resolution, tuple(spec.origin), spec)
