"""Command-line entry point: ``curbside validate|simulate|render|run``.

Exit codes: 0 success, 1 validation, 2 I/O, 3 internal.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import __version__
from .compositing import CompositingError
from .crowd import CrowdError, CrowdParams
from .engine import RunConfig, prepare_world, read_traces, render_frames, simulate, write_traces
from .geometry import GeometryError, SceneKind
from .scene_model import SceneError, load_scene, validate_scene
from .traffic import TrafficParams

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("curbside")


class UsageError(Exception):
    pass


def _coerce(cls, name, text):
    ftype = {f.name: f.type for f in dataclasses.fields(cls)}[name]
    return int(text) if ftype in (int, "int") else float(text)


def _overrides(pairs):
    """Split ``name=value`` pairs between crowd and traffic parameters."""
    crowd, traffic = {}, {}
    crowd_names = {f.name for f in dataclasses.fields(CrowdParams)}
    traffic_names = {f.name for f in dataclasses.fields(TrafficParams)}
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"--set expects name=value, got {pair!r}")
        name, text = pair.split("=", 1)
        scope, _, short = name.rpartition(".")
        try:
            if scope in ("", "crowd") and short in crowd_names:
                crowd[short] = _coerce(CrowdParams, short, text)
            elif scope in ("", "traffic") and short in traffic_names:
                traffic[short] = _coerce(TrafficParams, short, text)
            else:
                raise UsageError(f"unknown parameter {name!r}")
        except ValueError as exc:
            raise UsageError(f"bad value for {name}: {text!r}") from exc
    return crowd, traffic


def build_config(args) -> RunConfig:
    crowd, traffic = _overrides(getattr(args, "set", None))
    for flag in ("alpha", "beta", "gamma", "dt"):
        v = getattr(args, flag, None)
        if v is not None:
            crowd[flag] = v
    try:
        cp = CrowdParams(**crowd)
        tp = TrafficParams(**{**traffic, "dt": cp.dt})
        duration = 30.0 if args.duration is None else args.duration
        return RunConfig(seed=args.seed, duration_s=duration, cell_size=args.cell_size,
                         crowd=cp, traffic=tp, dump_fields=getattr(args, "dump_fields", False),
                         dump_interval=getattr(args, "dump_interval", 10),
                         ticks_per_frame=getattr(args, "ticks_per_frame", 1), output_dir=Path(args.out))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------- subcommands ----------

def scene_checks(path):
    """Yield (check name, passed, detail) for a scenario file, stopping after a fatal failure."""
    try:
        scene = load_scene(path)
    except OSError as exc:
        yield "load", False, f"I/O error: {exc}"
        return
    except SceneError as exc:
        yield "load", False, str(exc)
        return
    yield "load", True, f"{scene.intrinsics.width_px}x{scene.intrinsics.height_px}"
    try:
        validate_scene(scene)
        yield "invariants", True, "rasters, labels, depth, lanes, crosswalks"
    except SceneError as exc:
        yield "invariants", False, str(exc)
        return
    try:
        world = prepare_world(scene)
    except (GeometryError, ValueError) as exc:
        yield "ground plane / bev", False, str(exc)
        return
    yield "ground plane", True, "a={:.4f} b={:.4f} c={:.4f}".format(*world.plane.coefficients)
    yield "classification", True, world.kind.value
    n_walk = int(world.bev.walkable.sum())
    yield "walkable area", n_walk > 0, f"{n_walk} cells"
    if world.kind is SceneKind.MIXED:
        yield "lanes", len(world.lanes) > 0, f"{len(world.lanes)} lane(s)"
    for w in world.warnings:
        yield "warning", True, w


def cmd_validate(args) -> int:
    ok = True
    for name, passed, detail in scene_checks(args.scenario):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return EXIT_OK if ok else EXIT_VALIDATION


def _simulate(args, config):
    scene = load_scene(args.scenario)
    world = prepare_world(scene, config.cell_size)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    dump_dir = out / "fields" if config.dump_fields else None
    result = simulate(scene, config, world, dump_dir=dump_dir)
    write_traces(result.rows, out / "traces.csv")
    print(f"wrote {len(result.rows)} rows to {out / 'traces.csv'}")
    if getattr(args, "figures", False):
        from .plotting import plot_speed_profile, plot_trajectories
        plot_trajectories(world.bev, result.rows, out / "trajectories.png", world.lanes, world.crosswalks,
                          title=scene.name)
        plot_speed_profile(result.rows, out / "activity.png", config.dt)
        print(f"wrote figures to {out}")
    return scene, world, result


def cmd_simulate(args) -> int:
    _simulate(args, build_config(args))
    return EXIT_OK


def _render(scene, world, rows, config, n_ticks=None):
    lane_ids = {r.lane for r in rows if r.kind == "car"}
    if any(l is None or not 0 <= l < len(world.lanes) for l in lane_ids):
        raise UsageError("trace references lanes the scene does not have")
    frames = render_frames(scene, rows, config.output_dir / "frames", world, n_ticks, config.ticks_per_frame)
    print(f"wrote {len(frames)} frames to {config.output_dir / 'frames'}")
    return frames


def cmd_render(args) -> int:
    config = build_config(args)
    scene = load_scene(args.scenario)
    world = prepare_world(scene, config.cell_size)
    try:
        rows = read_traces(args.traces)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{args.traces}: {exc}") from exc
    n_ticks = config.n_ticks if args.duration_given else None
    _render(scene, world, rows, config, n_ticks)
    return EXIT_OK


def cmd_run(args) -> int:
    config = build_config(args)
    scene, world, result = _simulate(args, config)
    _render(scene, world, result.rows, config, result.n_ticks)
    return EXIT_OK


# ---------- parser ----------

def _common(p, duration=30.0):
    p.add_argument("scenario", type=Path, help="scenario file (.scn)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=None, help=f"simulated seconds (default {duration:g})")
    p.add_argument("--dt", type=float, default=None, help="tick length in seconds")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--cell-size", type=float, default=0.25, help="BEV cell size in meters")
    p.add_argument("--set", action="append", metavar="NAME=VALUE",
                   help="override any crowd or traffic parameter, e.g. --set v_max=10 (repeatable)")
    p.add_argument("--out", default="out", help="output directory")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curbside", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("scenario", type=Path)
    p.set_defaults(func=cmd_validate)

    for name, func, helptext in (("simulate", cmd_simulate, "run pedestrians and cars, write traces.csv"),
                                 ("render", cmd_render, "composite agents from a trace into frames"),
                                 ("run", cmd_run, "simulate then render")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        if name == "render":
            p.add_argument("traces", type=Path, help="traces.csv from simulate")
        if name in ("simulate", "run"):
            p.add_argument("--dump-fields", action="store_true", help="write phi/C/G/V rasters per pedestrian")
            p.add_argument("--dump-interval", type=int, default=10, help="ticks between field dumps")
            p.add_argument("--figures", action="store_true", help="also write PNG figures next to traces.csv")
        if name in ("render", "run"):
            p.add_argument("--ticks-per-frame", type=int, default=1)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if hasattr(args, "duration"):
        args.duration_given = args.duration is not None
        if args.duration is None:
            args.duration = 30.0
    try:
        return args.func(args)
    except (SceneError, GeometryError, CrowdError, CompositingError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
