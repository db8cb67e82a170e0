"""Declarative run description read from an INI file.

Sections and keys (everything except ``[seeds]`` has defaults)::

    [scenario]   name, duration (s), frame_rate (Hz), output
    [terrain]    length, width, resolution, origin_x, origin_y, male_width,
                 female_width, male_height, female_height, male_band_start,
                 noise_amplitude, noise_correlation
    [obstacle.*] x, y, size_x, size_y, top, t_start, t_end   (any number)
    [rig]        height, spacing, tilt_deg, stride, max_range,
                 fx, fy, cx, cy, width_px, height_px
    [noise]      depth_a, depth_b, lateral, acc_n, gyr_n, acc_w, gyr_w,
                 g_norm, perturb
    [trajectory] start_x, start_y, start_yaw_deg,
                 segments = "v omega duration" triples separated by ';' or newlines
    [map]        resolution, side_length, gate, kernel_sigma, edge_gate,
                 fusion_every, align, align_radius, prior_noise
    [seeds]      terrain, sensor, drift, prior   (all required)
"""

from __future__ import annotations

import configparser
import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .sim import Intrinsics, NoiseModel, Obstacle, SensorRig, TerrainSpec
from .sim.terrain import InvalidSpec


class SchemaError(ValueError):
    """Scenario file problem; carries the offending line and field when known."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None,
                 path: str | None = None):
        self.line = line
        self.field = field
        self.path = path
        where = path or "<scenario>"
        if line is not None:
            where += f":{line}"
        if field:
            where += f" [{field}]"
        super().__init__(f"{where}: {message}")


_FLOAT, _INT, _BOOL, _STR = "float", "int", "bool", "str"

_SCHEMA = {
    "scenario": {"name": (_STR, "scenario"), "duration": (_FLOAT, 10.0),
                 "frame_rate": (_FLOAT, 10.0), "output": (_STR, None)},
    "terrain": {"length": (_FLOAT, 30.0), "width": (_FLOAT, 8.0), "resolution": (_FLOAT, 0.01),
                "origin_x": (_FLOAT, -5.0), "origin_y": (_FLOAT, -4.0),
                "male_width": (_FLOAT, 0.030), "female_width": (_FLOAT, 1.500),
                "male_height": (_FLOAT, 1.10), "female_height": (_FLOAT, 0.90),
                "male_band_start": (_FLOAT, 0.75), "noise_amplitude": (_FLOAT, 0.05),
                "noise_correlation": (_FLOAT, 0.1)},
    "obstacle": {"x": (_FLOAT, None), "y": (_FLOAT, None), "size_x": (_FLOAT, None),
                 "size_y": (_FLOAT, None), "top": (_FLOAT, None),
                 "t_start": (_FLOAT, -math.inf), "t_end": (_FLOAT, math.inf)},
    "rig": {"height": (_FLOAT, 1.8), "spacing": (_FLOAT, 0.75), "tilt_deg": (_FLOAT, 30.0),
            "stride": (_INT, 8), "max_range": (_FLOAT, 4.0), "fx": (_FLOAT, 430.0),
            "fy": (_FLOAT, 430.0), "cx": (_FLOAT, 424.0), "cy": (_FLOAT, 240.0),
            "width_px": (_INT, 848), "height_px": (_INT, 480)},
    "noise": {"depth_a": (_FLOAT, 0.001), "depth_b": (_FLOAT, 0.0019), "lateral": (_FLOAT, 0.001),
              "acc_n": (_FLOAT, 0.04), "gyr_n": (_FLOAT, 0.004), "acc_w": (_FLOAT, 0.002),
              "gyr_w": (_FLOAT, 4.0e-5), "g_norm": (_FLOAT, 9.805), "perturb": (_BOOL, True)},
    "trajectory": {"start_x": (_FLOAT, 0.0), "start_y": (_FLOAT, 0.0),
                   "start_yaw_deg": (_FLOAT, 0.0), "segments": (_STR, "1.0 0.0 inf")},
    "map": {"resolution": (_FLOAT, 0.05), "side_length": (_FLOAT, 10.0), "gate": (_FLOAT, 2.0),
            "kernel_sigma": (_FLOAT, 1.0), "edge_gate": (_FLOAT, math.inf), "fusion_every": (_INT, 10),
            "align": (_BOOL, False), "align_radius": (_INT, 10), "prior_noise": (_FLOAT, 0.01)},
    "seeds": {"terrain": (_INT, None), "sensor": (_INT, None), "drift": (_INT, None),
              "prior": (_INT, None)},
}

_REQUIRED_SECTIONS = ("seeds",)


@dataclass(frozen=True)
class Segment:
    v: float
    omega: float
    duration: float


@dataclass(frozen=True)
class MapParams:
    resolution: float = 0.05
    side_length: float = 10.0
    gate: float = 2.0
    kernel_sigma: float = 1.0
    edge_gate: float = math.inf
    fusion_every: int = 10
    align: bool = False
    align_radius: int = 10
    prior_noise: float = 0.01


@dataclass(frozen=True)
class Seeds:
    terrain: int
    sensor: int
    drift: int
    prior: int


@dataclass(frozen=True)
class Scenario:
    name: str
    duration: float
    frame_rate: float
    terrain: TerrainSpec
    rig: SensorRig
    noise: NoiseModel
    start: tuple[float, float, float]
    segments: tuple[Segment, ...]
    map: MapParams
    seeds: Seeds
    output: str
    source: str = field(default="", repr=False)

    @property
    def dt(self) -> float:
        return 1.0 / self.frame_rate

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.source.encode("utf-8")).hexdigest()

    def command_at(self, t: float) -> tuple[float, float]:
        """(v, omega) active at time ``t``; the robot stops after the last segment."""
        t0 = 0.0
        for seg in self.segments:
            if t < t0 + seg.duration - 1e-9:
                return seg.v, seg.omega
            t0 += seg.duration
        return 0.0, 0.0


def _line_index(text: str) -> dict:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    out = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            out.setdefault((section, None), n)
            continue
        if section and s and not s.startswith(("#", ";")) and not line[:1].isspace():
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            out.setdefault((section, key), n)
    return out


def _convert(kind, raw, section, key, lines, path):
    line = lines.get((section, key))
    try:
        if kind == _FLOAT:
            v = float(raw)
            if math.isnan(v):
                raise ValueError
            return v
        if kind == _INT:
            return int(raw, 0)
        if kind == _BOOL:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        return raw.strip()
    except ValueError:
        raise SchemaError(f"expected {kind}, got {raw!r}", line, f"{section}.{key}", path) from None


def _read_section(cp, section, schema_key, lines, path):
    spec = _SCHEMA[schema_key]
    values = {}
    sec = cp[section] if cp.has_section(section) else {}
    for key in sec:
        if key not in spec:
            raise SchemaError("unknown key", lines.get((section, key)), f"{section}.{key}", path)
    for key, (kind, default) in spec.items():
        if key in sec:
            values[key] = _convert(kind, sec[key], section, key, lines, path)
        elif default is None and not (schema_key == "scenario" and key == "output"):
            raise SchemaError("missing required key", lines.get((section, None)),
                              f"{section}.{key}", path)
        else:
            values[key] = default
    return values


def _segments(raw: str, lines, path) -> tuple[Segment, ...]:
    line = lines.get(("trajectory", "segments"))
    out = []
    for chunk in re.split(r"[;\n]", raw):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split()
        try:
            if len(parts) != 3:
                raise ValueError
            v, w, d = (float(p) for p in parts)
        except ValueError:
            raise SchemaError(f"segment {chunk!r} is not 'v omega duration'", line,
                              "trajectory.segments", path) from None
        if not d > 0:
            raise SchemaError("segment duration must be > 0", line, "trajectory.segments", path)
        out.append(Segment(v, w, d))
    if not out:
        raise SchemaError("no trajectory segments", line, "trajectory.segments", path)
    return tuple(out)


def _apply_overrides(text: str, overrides: dict, lines: dict) -> str:
    """Rewrite scenario text so it parses to the overridden values on its own."""
    out = text.splitlines()
    inserts: dict[int, list[str]] = {}
    appended: dict[str, list[str]] = {}
    for dotted, value in sorted(overrides.items()):
        section, _, key = dotted.rpartition(".")
        entry = f"{key} = {value}"
        if (section, key) in lines:
            out[lines[(section, key)] - 1] = entry
        elif (section, None) in lines:
            inserts.setdefault(lines[(section, None)], []).append(entry)
        else:
            appended.setdefault(section, []).append(entry)
    for n in sorted(inserts, reverse=True):
        out[n:n] = inserts[n]
    for section, entries in appended.items():
        out += ["", f"[{section}]", *entries]
    return "\n".join(out) + "\n"


def _check(cond, message, lines, section, key, path):
    if not cond:
        raise SchemaError(message, lines.get((section, key)), f"{section}.{key}", path)


def parse_scenario(text: str, path: str | None = None, overrides: dict | None = None) -> Scenario:
    """Validate scenario text; ``overrides`` maps ``"section.key"`` to string values."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=path or "<scenario>")
    except configparser.DuplicateOptionError as e:
        raise SchemaError("duplicate key", e.lineno, f"{e.section}.{e.option}", path) from None
    except configparser.DuplicateSectionError as e:
        raise SchemaError("duplicate section", e.lineno, e.section, path) from None
    except configparser.MissingSectionHeaderError as e:
        raise SchemaError("key outside any section", e.lineno, None, path) from None
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else None
        raise SchemaError("malformed line", lineno, None, path) from None
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.rpartition(".")
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][key] = str(value)
    lines = _line_index(text)

    for section in cp.sections():
        base = section.split(".", 1)[0]
        if base not in _SCHEMA or (base == "obstacle") != (section != base):
            raise SchemaError("unknown section", lines.get((section, None)), section, path)
    for section in _REQUIRED_SECTIONS:
        if not cp.has_section(section):
            raise SchemaError("missing required section", None, section, path)

    sc = _read_section(cp, "scenario", "scenario", lines, path)
    te = _read_section(cp, "terrain", "terrain", lines, path)
    rg = _read_section(cp, "rig", "rig", lines, path)
    nz = _read_section(cp, "noise", "noise", lines, path)
    tr = _read_section(cp, "trajectory", "trajectory", lines, path)
    mp = _read_section(cp, "map", "map", lines, path)
    sd = _read_section(cp, "seeds", "seeds", lines, path)

    _check(sc["frame_rate"] > 0, "frame rate must be > 0", lines, "scenario", "frame_rate", path)
    _check(sc["duration"] > 0, "duration must be > 0", lines, "scenario", "duration", path)
    _check(mp["resolution"] > 0, "must be > 0", lines, "map", "resolution", path)
    _check(mp["side_length"] >= 2 * mp["resolution"], "map too small", lines, "map", "side_length",
           path)
    _check(mp["gate"] > 0, "must be > 0", lines, "map", "gate", path)
    _check(mp["kernel_sigma"] >= 0, "must be >= 0", lines, "map", "kernel_sigma", path)
    _check(mp["fusion_every"] >= 1, "must be >= 1", lines, "map", "fusion_every", path)
    _check(mp["align_radius"] >= 0, "must be >= 0", lines, "map", "align_radius", path)
    _check(mp["prior_noise"] >= 0, "must be >= 0", lines, "map", "prior_noise", path)
    for key, seed in sd.items():
        _check(seed >= 0, "seeds must be non-negative", lines, "seeds", key, path)

    obstacles = []
    for section in sorted(s for s in cp.sections() if s.startswith("obstacle.")):
        ob = _read_section(cp, section, "obstacle", lines, path)
        _check(ob["size_x"] > 0 and ob["size_y"] > 0, "obstacle size must be > 0", lines, section,
               "size_x", path)
        obstacles.append(Obstacle(**ob))

    terrain = TerrainSpec(
        length=te["length"], width=te["width"], resolution=te["resolution"],
        origin=(te["origin_x"], te["origin_y"]), male_width=te["male_width"],
        female_width=te["female_width"], male_height=te["male_height"],
        female_height=te["female_height"], male_band_start=te["male_band_start"],
        noise_amplitude=te["noise_amplitude"], noise_correlation=te["noise_correlation"],
        obstacles=tuple(obstacles),
    )
    try:
        terrain.validate()
    except InvalidSpec as e:
        raise SchemaError(str(e), lines.get(("terrain", None)), "terrain", path) from None

    try:
        intr = Intrinsics(rg["fx"], rg["fy"], rg["cx"], rg["cy"], rg["width_px"], rg["height_px"])
        rig = SensorRig.three_camera(
            height=rg["height"], spacing=rg["spacing"], tilt=math.radians(rg["tilt_deg"]),
            intrinsics=intr, stride=rg["stride"], max_range=rg["max_range"],
        )
    except ValueError as e:
        raise SchemaError(str(e), lines.get(("rig", None)), "rig", path) from None
    try:
        noise = NoiseModel(**nz)
    except ValueError as e:
        raise SchemaError(str(e), lines.get(("noise", None)), "noise", path) from None

    return Scenario(
        name=sc["name"],
        duration=sc["duration"],
        frame_rate=sc["frame_rate"],
        terrain=terrain,
        rig=rig,
        noise=noise,
        start=(tr["start_x"], tr["start_y"], math.radians(tr["start_yaw_deg"])),
        segments=_segments(tr["segments"], lines, path),
        map=MapParams(**mp),
        seeds=Seeds(**sd),
        output=sc["output"] or sc["name"],
        source=_apply_overrides(text, overrides, lines) if overrides else text,
    )


def load_scenario(path, overrides: dict | None = None) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise SchemaError(f"cannot read scenario: {e.strerror}", None, None, str(path)) from None
    return parse_scenario(text, str(path), overrides)


def bundled_scenario(name: str) -> Path:
    """Path of a scenario shipped with the package (``flat_zero_noise``, ``paddy_1ms``)."""
    from importlib.resources import files

    p = Path(str(files("canopymap") / "scenarios" / f"{name}.ini"))
    if not p.exists():
        raise FileNotFoundError(f"no bundled scenario named {name!r}")
    return p
