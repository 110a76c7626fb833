"""Synthetic street scenes rendered from a top-down layout.

The bundled scenarios under ``curbside/data/scenes`` are produced by
``python -m curbside.scenes OUTDIR``. Each layout is a set of labeled ground
polygons plus vertical boxes (poles) seen by a pinhole camera ``camera_height``
meters above flat ground, pitched down by ``pitch`` radians.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .scene_model import (
    CameraIntrinsics, Crosswalk, Label, Lane, Lighting, LightingMode, SceneDescription,
    TrafficLightSchedule, load_scene, points_in_convex_polygon, save_scene,
)

BUNDLED = ("corridor", "plaza", "crosswalk", "street", "pole_walk")

COLORS = {
    Label.ROAD: (0.36, 0.36, 0.38),
    Label.SIDEWALK: (0.64, 0.61, 0.57),
    Label.CROSSWALK: (0.85, 0.85, 0.83),
    Label.OBSTACLE: (0.22, 0.26, 0.24),
    Label.WALL: (0.62, 0.46, 0.40),
    Label.OTHER: (0.34, 0.48, 0.30),
}
SKY = (0.62, 0.76, 0.94)


def rect(x0, x1, y0, y1):
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))


@dataclass
class Layout:
    name: str
    regions: list                      # (Label, convex polygon); later entries win
    poles: list = field(default_factory=list)   # (x, y, half_width, height)
    shadows: list = field(default_factory=list)  # convex polygons of existing ground shadow
    shadow_tint: tuple = (0.46, 0.48, 0.60)
    lighting: Lighting = Lighting()
    lanes: tuple = ()
    crosswalks: tuple = ()
    wall_depth: float | None = None
    camera_height: float = 1.6
    pitch: float = 0.0
    width: int = 192
    height: int = 144
    focal: float = 170.0
    depth_noise: float = 0.01
    seed: int = 0


def camera_axes(pitch: float):
    """Camera x, y (image down) and z axes in ground coordinates (x, y, up)."""
    x_c = np.array([1.0, 0.0, 0.0])
    y_c = np.array([0.0, -math.sin(pitch), -math.cos(pitch)])
    z_c = np.array([0.0, math.cos(pitch), -math.sin(pitch)])
    return x_c, y_c, z_c


def render_layout(layout: Layout) -> SceneDescription:
    intr = CameraIntrinsics(layout.focal, layout.width, layout.height)
    xs, ys = intr.pixel_centers()
    x_c, y_c, z_c = camera_axes(layout.pitch)
    dirs = (xs / intr.focal_length_px)[..., None] * x_c + (ys / intr.focal_length_px)[..., None] * y_c + z_c
    cam = np.array([0.0, 0.0, layout.camera_height])
    shape = intr.shape

    # parameter t along dirs equals camera-frame depth Z
    t_best = np.full(shape, np.inf)
    labels = np.full(shape, int(Label.OTHER), dtype=np.uint8)
    down = dirs[..., 2] < -1e-9
    t_ground = np.where(down, layout.camera_height / np.where(down, -dirs[..., 2], 1.0), np.inf)
    ground_hit = np.isfinite(t_ground)
    t_best[ground_hit] = t_ground[ground_hit]
    gp = cam + t_ground[..., None] * dirs
    gl = np.full(shape, int(Label.OTHER), dtype=np.uint8)
    flat = gp[ground_hit][:, :2]
    sub = np.full(len(flat), int(Label.OTHER), dtype=np.uint8)
    for lab, poly in layout.regions:
        sub[points_in_convex_polygon(flat, poly)] = int(lab)
    gl[ground_hit] = sub
    labels[ground_hit] = gl[ground_hit]

    if layout.wall_depth is not None:
        wall = layout.wall_depth < t_best
        t_best[wall] = layout.wall_depth
        labels[wall] = int(Label.WALL)

    for (px, py, hw, hh) in layout.poles:
        lo = np.array([px - hw, py - hw, 0.0])
        hi = np.array([px + hw, py + hw, hh])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - cam) / dirs
            t2 = (hi - cam) / dirs
        tn = np.nanmax(np.minimum(t1, t2), axis=-1)
        tf = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = (tn <= tf) & (tn > 0) & (tn < t_best)
        t_best[hit] = tn[hit]
        labels[hit] = int(Label.OBSTACLE)

    rng = np.random.default_rng(layout.seed)
    depth = t_best.copy()
    finite = np.isfinite(depth)
    depth[finite] *= 1.0 + layout.depth_noise * rng.standard_normal(finite.sum())
    depth = depth.astype(np.float32)

    colors = np.array([COLORS[Label(v)] for v in range(len(Label))])
    img = colors[labels]
    img[~finite] = SKY
    ground_lab = np.isin(labels, [int(Label.ROAD), int(Label.SIDEWALK), int(Label.CROSSWALK)])
    cross = labels == Label.CROSSWALK
    stripes = (np.floor(np.where(ground_hit, gp[..., 0], 0.0) / 0.5).astype(int) % 2 == 0) & cross
    img[cross & ~stripes] = COLORS[Label.ROAD]
    img *= 1.0 + 0.04 * rng.standard_normal(shape)[..., None]

    shadow = np.zeros(shape, dtype=bool)
    on_ground = ground_hit & (labels != Label.OBSTACLE) & (labels != Label.WALL)
    for poly in layout.shadows:
        inside = np.zeros(shape, dtype=bool)
        inside[on_ground] = points_in_convex_polygon(gp[on_ground][:, :2], poly)
        shadow |= inside
    img[shadow] *= np.asarray(layout.shadow_tint)
    img = np.clip(img, 0.0, 1.0)
    background = np.rint(img * 255.0) / 255.0
    return SceneDescription(intr, labels, depth, layout.lighting, shadow & ground_lab, background,
                            layout.lanes, layout.crosswalks, wall_depth_m=layout.wall_depth,
                            name=layout.name)


def _sun(az_deg, el_deg, directional=0.85, ambient=0.35):
    return Lighting(LightingMode.DIRECTIONAL, math.radians(az_deg), math.radians(el_deg), directional, ambient)


def layouts() -> dict:
    out = {}
    out["corridor"] = Layout(
        "corridor",
        regions=[(Label.SIDEWALK, rect(-1.5, 1.5, 1.0, 28.0))],
        shadows=[rect(-1.5, 0.5, 4.0, 7.5)],
        lighting=_sun(125, 50), wall_depth=32.0, seed=1)
    out["plaza"] = Layout(
        "plaza",
        regions=[(Label.SIDEWALK, rect(-9.0, 9.0, 1.0, 22.0)), (Label.ROAD, rect(4.0, 7.0, 20.0, 22.0))],
        poles=[(-2.0, 9.0, 0.15, 3.0), (2.5, 13.0, 0.15, 3.0), (-4.0, 16.0, 0.2, 3.0)],
        lighting=Lighting(LightingMode.DIFFUSE, 0.0, math.pi / 4, 0.5, 0.6), wall_depth=26.0, seed=2)
    lane0 = Lane(((-14.0, 11.75), (14.0, 11.75)), 3.5)
    lane1 = Lane(((14.0, 15.25), (-14.0, 15.25)), 3.5)
    crossing = Crosswalk(rect(-1.5, 1.5, 10.0, 17.0), {0: 11.5, 1: 11.5}, TrafficLightSchedule(12.0, 12.0, 0.0))
    out["crosswalk"] = Layout(
        "crosswalk",
        regions=[(Label.SIDEWALK, rect(-14.0, 14.0, 1.0, 10.0)), (Label.ROAD, rect(-30.0, 30.0, 10.0, 17.0)),
                 (Label.SIDEWALK, rect(-14.0, 14.0, 17.0, 22.0)), (Label.CROSSWALK, rect(-1.5, 1.5, 10.0, 17.0))],
        shadows=[rect(2.5, 8.0, 3.0, 6.5)],
        lighting=_sun(40, 45), lanes=(lane0, lane1), crosswalks=(crossing,), wall_depth=25.0,
        pitch=math.radians(4.0), seed=3)
    out["street"] = Layout(
        "street",
        regions=[(Label.ROAD, rect(-3.5, 3.5, 0.0, 40.0)), (Label.SIDEWALK, rect(-7.0, -3.5, 1.0, 28.0)),
                 (Label.SIDEWALK, rect(3.5, 7.0, 1.0, 28.0))],
        poles=[(-4.2, 10.0, 0.12, 3.5), (4.3, 16.0, 0.12, 3.5)],
        shadows=[rect(-7.0, -3.5, 5.0, 9.0), rect(-3.5, 0.0, 5.0, 9.0)],
        lighting=_sun(210, 35),
        lanes=(Lane(((1.75, 0.5), (1.75, 30.0)), 3.5), Lane(((-1.75, 30.0), (-1.75, 0.5)), 3.5)),
        wall_depth=34.0, seed=4)
    out["pole_walk"] = Layout(
        "pole_walk",
        regions=[(Label.SIDEWALK, rect(-3.0, 3.0, 1.0, 20.0)), (Label.SIDEWALK, rect(-3.0, 10.0, 14.0, 20.0))],
        poles=[(0.0, 8.0, 0.2, 3.0), (1.5, 15.0, 0.15, 3.0)],
        lighting=Lighting(LightingMode.DIFFUSE, 0.0, math.pi / 4, 0.4, 0.65), wall_depth=24.0,
        pitch=math.radians(3.0), seed=5)
    return out


def bundled_scene_path(name: str) -> Path:
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled scene {name!r}; choose from {', '.join(BUNDLED)}")
    return Path(str(resources.files("curbside") / "data" / "scenes" / f"{name}.scn"))


def load_bundled(name: str) -> SceneDescription:
    return load_scene(bundled_scene_path(name))


def write_bundled(out_dir) -> list:
    out = Path(out_dir)
    paths = []
    for name, layout in layouts().items():
        path = out / f"{name}.scn"
        save_scene(render_layout(layout), path)
        paths.append(path)
    return paths


if __name__ == "__main__":
    for p in write_bundled(sys.argv[1] if len(sys.argv) > 1 else "scenes"):
        print(p)
