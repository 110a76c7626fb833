"""Scene preparation, the shared tick loop, trace files and frame rendering."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .compositing import SceneRenderer, render_video
from .crowd import CrowdParams, CrowdSim, TraceRow
from .geometry import (
    DEFAULT_CELL_SIZE, BevGrid, GroundPlane, SceneKind, build_bev, classify_scene,
    fit_scene_plane, pixels_to_ground,
)
from .scene_model import Crosswalk, Label, SceneDescription, write_ppm, write_raster
from .traffic import (
    TrafficParams, TrafficSim, derive_lanes, derive_stop_arcs, gate_pedestrians,
)

log = logging.getLogger(__name__)

TRACE_HEADER = ["tick", "id", "kind", "x_m", "y_m", "state", "lane", "s_m", "v_mps"]
KIND_ORDER = {"ped": 0, "car": 1}


@dataclass
class RunConfig:
    seed: int = 0
    duration_s: float = 30.0
    cell_size: float = DEFAULT_CELL_SIZE
    crowd: CrowdParams = field(default_factory=CrowdParams)
    traffic: TrafficParams = field(default_factory=TrafficParams)
    dump_fields: bool = False
    dump_interval: int = 10
    ticks_per_frame: int = 1
    output_dir: Path = Path("out")

    def __post_init__(self):
        if self.duration_s < 0:
            raise ValueError("duration_s must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def dt(self) -> float:
        return self.crowd.dt

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration_s / self.dt)) if self.dt > 0 else 0


@dataclass
class World:
    """Everything derived once from a scene before simulation."""

    scene: SceneDescription
    plane: GroundPlane
    kind: SceneKind
    bev: BevGrid
    lanes: tuple
    crosswalks: tuple
    warnings: list = field(default_factory=list)


def prepare_world(scene: SceneDescription, cell_size: float = DEFAULT_CELL_SIZE) -> World:
    plane = fit_scene_plane(scene)
    kind = classify_scene(scene.labels, scene.drivable_threshold)
    bev = build_bev(scene, plane, cell_size, kind)
    warnings = []
    lanes = scene.lanes
    crosswalks = scene.crosswalks
    if kind is SceneKind.PEDESTRIAN_ONLY:
        if lanes:
            warnings.append("pedestrian-only scene: ignoring lanes from the scenario file")
        lanes = ()
    elif not lanes:
        xs, ys = scene.intrinsics.pixel_centers()
        road = scene.labels == Label.ROAD
        pts, z, ok = pixels_to_ground(xs[road], ys[road], scene.intrinsics, plane)
        lanes = derive_lanes(pts[ok & (z <= 30.0)])
        crosswalks = tuple(Crosswalk(cw.polygon, derive_stop_arcs(cw, lanes), cw.schedule)
                           for cw in crosswalks)
        warnings.append(f"no lanes in scenario; derived {len(lanes)} from the drivable region")
    for w in warnings:
        log.warning(w)
    return World(scene, plane, kind, bev, tuple(lanes), tuple(crosswalks), warnings)


@dataclass
class SimulationResult:
    rows: list
    world: World
    n_ticks: int
    car_history: list = field(default_factory=list)   # per tick: {car_id: (lane, s_arc, speed)}


def simulate(scene: SceneDescription, config: RunConfig, world: World | None = None,
             dump_dir: Path | None = None) -> SimulationResult:
    """Run pedestrians and cars side by side for ``config.duration_s``."""
    world = world if world is not None else prepare_world(scene, config.cell_size)
    crowd_rng, traffic_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    crosswalks = world.crosswalks
    bev = world.bev

    def gates(time_s):
        return gate_pedestrians(crosswalks, time_s, bev) if crosswalks else None

    crowd = CrowdSim(bev, config.crowd, crowd_rng, gates=gates)
    traffic = TrafficSim(world.lanes, crosswalks, replace(config.traffic, dt=config.dt), traffic_rng)
    rows, history = [], []
    for tick in range(config.n_ticks):
        tick_rows = crowd.step() + traffic.step()
        tick_rows.sort(key=lambda r: (KIND_ORDER[r.kind], r.id))
        rows.extend(tick_rows)
        history.append({c.id: (c.lane_index, c.s_arc, c.speed)
                        for cars in traffic.cars.values() for c in cars})
        if dump_dir is not None and tick % max(1, config.dump_interval) == 0:
            dump_fields(dump_dir, tick, crowd.last_fields)
    return SimulationResult(rows, world, config.n_ticks, history)


def dump_fields(out_dir: Path, tick: int, plans: dict) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for pid in sorted(plans):
        plan = plans[pid]
        for name, arr in (("phi", plan.phi), ("C", plan.cost), ("G", plan.discomfort), ("V", plan.speed)):
            if arr is None:
                continue
            path = out_dir / f"tick{tick:06d}_ped{pid}_{name}.svr"
            write_raster(path, np.asarray(arr, dtype=np.float32))
            written.append(path)
    return written


# ---------- trace files ----------

def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def write_traces(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in rows:
            w.writerow([r.tick, r.id, r.kind, _fmt(r.x), _fmt(r.y), r.state,
                        "" if r.lane is None else r.lane, _fmt(r.s_arc), _fmt(r.speed)])


def read_traces(path) -> list:
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or reader.fieldnames[:6] != TRACE_HEADER[:6]:
            raise ValueError(f"{path}: unexpected trace header {reader.fieldnames}")
        for rec in reader:
            lane = rec.get("lane") or None
            s = rec.get("s_m") or None
            v = rec.get("v_mps") or None
            rows.append(TraceRow(int(rec["tick"]), int(rec["id"]), rec["kind"], float(rec["x_m"]),
                                 float(rec["y_m"]), rec["state"], None if lane is None else int(lane),
                                 None if s is None else float(s), None if v is None else float(v)))
    return rows


# ---------- rendering ----------

def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CURBSIDE_THREADS", "1")))
    except ValueError:
        return 1


def render_frames(scene: SceneDescription, rows, out_dir, world: World | None = None,
                  n_ticks: int | None = None, ticks_per_frame: int = 1) -> list:
    """Write ``frame_%06d.ppm`` for every rendered tick and return the paths."""
    world = world if world is not None else prepare_world(scene)
    renderer = SceneRenderer(scene, world.plane)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def write(item):
        tick, buffers = item
        path = out_dir / f"frame_{tick:06d}.ppm"
        write_ppm(path, buffers.f_final)
        return path

    frames = render_video(renderer, rows, n_ticks, ticks_per_frame, world.lanes)
    threads = worker_count()
    if threads == 1:
        return [write(item) for item in frames]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(write, frames))
