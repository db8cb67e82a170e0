"""Command-line entry point: ``canopymap [--out DIR] {simulate,eval,export} ...``.

Exit codes: 0 success, 1 invalid input (scenario schema, unknown layer or
format, bad arguments), 2 runtime failure (missing artifacts, I/O, numerics).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .runner import FORMATS, LAYERS, MissingArtifact, UnknownLayer, eval_run, export_map, run_scenario
from .scenario import SchemaError, bundled_scenario

log = logging.getLogger("canopymap")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="canopymap", description="Canopy elevation mapping simulator and tools.")
    p.add_argument("--out", default=".", help="base directory all other paths are relative to")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run a scenario and write its artifacts")
    s.add_argument("scenario", help="scenario INI file, or the name of a bundled scenario")
    s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a scenario value (repeatable)")

    e = sub.add_parser("eval", help="compute trajectory and map metrics for a run")
    e.add_argument("run_dir")
    e.add_argument("--delta", type=float, default=1.0, help="RPE sub-trajectory length (m)")

    x = sub.add_parser("export", help="export one map layer of a run")
    x.add_argument("run_dir")
    x.add_argument("--layer", required=True, help=f"one of {', '.join(LAYERS)}")
    x.add_argument("--format", required=True, dest="fmt", help=f"one of {', '.join(FORMATS)}")
    x.add_argument("--range", nargs=2, type=float, metavar=("LO", "HI"),
                   help="value range mapped onto the PGM grey levels")
    return p


def _resolve(base: Path, name: str) -> Path:
    p = base / name
    if p.is_file() or p.suffix:
        return p
    try:
        return bundled_scenario(name)
    except FileNotFoundError:
        return p


def _overrides(items):
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise SchemaError(f"override {item!r} is not SECTION.KEY=VALUE", field=key or None)
        out[key.strip()] = value.strip()
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    base = Path(args.out)
    try:
        if args.command == "simulate":
            run = run_scenario(_resolve(base, args.scenario), base, _overrides(args.set))
            t = run.frame_times
            log.info("frame cycle: median %.1f ms, max %.1f ms", 1e3 * float(sorted(t)[len(t) // 2]),
                     1e3 * float(t.max()))
            print(run.out_dir)
        elif args.command == "eval":
            metrics = eval_run(base / args.run_dir, args.delta)
            print((base / args.run_dir / "summary.txt").read_text(), end="")
            log.info("%s", metrics)
        else:
            print(export_map(base / args.run_dir, args.layer, args.fmt, args.range))
    except (SchemaError, UnknownLayer) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (MissingArtifact, OSError, ValueError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
