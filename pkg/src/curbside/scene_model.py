"""Domain types shared across the engine, raster I/O and scenario loading."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

SCENE_FORMAT = "curbside-scene/1"
RASTER_MAGIC = b"SVR1"
DTYPE_TAGS = {0: np.dtype("<u1"), 1: np.dtype("<f4")}

DEFAULT_DRIVABLE_THRESHOLD = 0.05
DEFAULT_MAX_TILT = math.radians(60.0)


class SceneError(Exception):
    """Base class for scenario problems."""


class SceneParseError(SceneError):
    pass


class SceneValidationError(SceneError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


class Label(enum.IntEnum):
    OTHER = 0
    ROAD = 1
    SIDEWALK = 2
    OBSTACLE = 3
    CROSSWALK = 4
    WALL = 5


GROUND_LABELS = (Label.ROAD, Label.SIDEWALK, Label.CROSSWALK)


class LightingMode(str, enum.Enum):
    DIRECTIONAL = "directional"
    DIFFUSE = "diffuse"


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_length_px: float
    width_px: int
    height_px: int

    def __post_init__(self):
        if not self.focal_length_px > 0:
            raise SceneValidationError("focal_length_px", "must be positive")
        if self.width_px < 16 or self.height_px < 16:
            raise SceneValidationError("width_px/height_px", "image must be at least 16x16")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Center-relative (x, y) coordinates of every pixel center, y pointing down."""
        cols = np.arange(self.width_px) + 0.5 - self.width_px / 2.0
        rows = np.arange(self.height_px) + 0.5 - self.height_px / 2.0
        return np.meshgrid(cols, rows)

    def to_index(self, x_px, y_px):
        """Center-relative pixel coordinates to fractional (col, row) array coordinates."""
        return (np.asarray(x_px) + self.width_px / 2.0 - 0.5,
                np.asarray(y_px) + self.height_px / 2.0 - 0.5)


@dataclass(frozen=True)
class GroundPlane:
    """Plane a*X + b*Y + c*Z = 1 in camera coordinates (X right, Y down, Z forward)."""

    a: float
    b: float
    c: float
    max_tilt: float = DEFAULT_MAX_TILT

    def __post_init__(self):
        norm = math.sqrt(self.a ** 2 + self.b ** 2 + self.c ** 2)
        if norm == 0.0 or not math.isfinite(norm):
            raise SceneValidationError("ground_plane", "coefficients must be finite and non-zero")
        # angle between the plane normal and the camera's vertical axis
        tilt = math.acos(min(1.0, abs(self.b) / norm))
        if tilt > self.max_tilt:
            raise SceneValidationError(
                "ground_plane", f"normal tilted {math.degrees(tilt):.1f} deg from vertical")

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c], dtype=float)


@dataclass(frozen=True)
class Lighting:
    mode: LightingMode = LightingMode.DIFFUSE
    sun_azimuth: float = 0.0
    sun_elevation: float = math.pi / 4
    directional_intensity: float = 0.8
    ambient_intensity: float = 0.35

    def __post_init__(self):
        object.__setattr__(self, "mode", LightingMode(self.mode))
        if not 0.0 <= self.sun_azimuth < 2 * math.pi:
            raise SceneValidationError("sun_azimuth", "must lie in [0, 2*pi)")
        if self.mode is LightingMode.DIRECTIONAL and not 0.0 < self.sun_elevation <= math.pi / 2:
            raise SceneValidationError("sun_elevation", "directional light needs the sun above the horizon")
        if self.directional_intensity < 0 or self.ambient_intensity < 0:
            raise SceneValidationError("intensity", "light intensities must be non-negative")

    @property
    def directional(self) -> bool:
        return self.mode is LightingMode.DIRECTIONAL

    def sun_vector(self) -> np.ndarray:
        """Unit vector toward the light in ground coordinates (x, y, up).

        Diffuse scenes use a top-down light.
        """
        if not self.directional:
            return np.array([0.0, 0.0, 1.0])
        ce = math.cos(self.sun_elevation)
        return np.array([ce * math.cos(self.sun_azimuth), ce * math.sin(self.sun_azimuth),
                         math.sin(self.sun_elevation)])


@dataclass(frozen=True)
class Lane:
    centerline: tuple[tuple[float, float], ...]
    width_m: float = 3.5

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.centerline)
        object.__setattr__(self, "centerline", pts)
        if len(pts) < 2:
            raise SceneValidationError("lane.centerline", "needs at least two points")
        if not self.width_m > 0:
            raise SceneValidationError("lane.width_m", "must be positive")
        for p, q in zip(pts, pts[1:]):
            if p == q:
                raise SceneValidationError("lane.centerline", "consecutive points must be distinct")

    @property
    def points(self) -> np.ndarray:
        return np.asarray(self.centerline, dtype=float)

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    @property
    def length(self) -> float:
        return float(self.segment_lengths.sum())

    @property
    def directions(self) -> np.ndarray:
        seg = np.diff(self.points, axis=0)
        return seg / self.segment_lengths[:, None]

    def point_at(self, s: float) -> np.ndarray:
        pts, lens = self.points, self.segment_lengths
        cum = np.concatenate([[0.0], np.cumsum(lens)])
        k = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lens) - 1))
        return pts[k] + self.directions[k] * (s - cum[k])

    def direction_at(self, s: float) -> np.ndarray:
        cum = np.concatenate([[0.0], np.cumsum(self.segment_lengths)])
        k = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(cum) - 2))
        return self.directions[k]

    def arc_of(self, point) -> float:
        """Arc length of the closest centerline point to ``point``."""
        p = np.asarray(point, dtype=float)
        pts, dirs, lens = self.points, self.directions, self.segment_lengths
        cum = np.concatenate([[0.0], np.cumsum(lens)])
        best, best_d = 0.0, math.inf
        for k in range(len(lens)):
            t = float(np.clip(np.dot(p - pts[k], dirs[k]), 0.0, lens[k]))
            d = float(np.linalg.norm(pts[k] + dirs[k] * t - p))
            if d < best_d:
                best, best_d = cum[k] + t, d
        return best


@dataclass(frozen=True)
class TrafficLightSchedule:
    green_for_cars_s: float
    green_for_peds_s: float
    offset_s: float = 0.0

    def __post_init__(self):
        if not (self.green_for_cars_s > 0 and self.green_for_peds_s > 0):
            raise SceneValidationError("schedule", "both phase durations must be positive")

    @property
    def cycle_s(self) -> float:
        return self.green_for_cars_s + self.green_for_peds_s


@dataclass(frozen=True)
class Crosswalk:
    polygon: tuple[tuple[float, float], ...]
    stop_arcs: dict = field(default_factory=dict)
    schedule: Optional[TrafficLightSchedule] = None

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.polygon)
        object.__setattr__(self, "polygon", pts)
        object.__setattr__(self, "stop_arcs", {int(k): float(v) for k, v in self.stop_arcs.items()})
        if len(pts) < 3 or abs(polygon_area(pts)) < 1e-9:
            raise SceneValidationError("crosswalk.polygon", "polygon is degenerate")
        if not is_convex(pts):
            raise SceneValidationError("crosswalk.polygon", "polygon must be convex")

    def __hash__(self):
        return hash((self.polygon, tuple(sorted(self.stop_arcs.items())), self.schedule))


@dataclass(frozen=True, eq=False)
class SceneDescription:
    intrinsics: CameraIntrinsics
    labels: np.ndarray
    depth: np.ndarray
    lighting: Lighting
    shadow_mask: np.ndarray
    background: np.ndarray
    lanes: tuple[Lane, ...] = ()
    crosswalks: tuple[Crosswalk, ...] = ()
    drivable_threshold: float = DEFAULT_DRIVABLE_THRESHOLD
    wall_depth_m: Optional[float] = None
    name: str = "scene"

    def __post_init__(self):
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "crosswalks", tuple(self.crosswalks))
        for arr in (self.labels, self.depth, self.shadow_mask, self.background):
            arr.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, SceneDescription):
            return NotImplemented
        return (self.intrinsics == other.intrinsics and self.lighting == other.lighting
                and self.lanes == other.lanes and self.crosswalks == other.crosswalks
                and self.drivable_threshold == other.drivable_threshold
                and self.wall_depth_m == other.wall_depth_m
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.depth, other.depth)
                and np.array_equal(self.shadow_mask, other.shadow_mask)
                and np.array_equal(self.background, other.background))

    __hash__ = None

    @property
    def ground_mask(self) -> np.ndarray:
        return np.isin(self.labels, [int(l) for l in GROUND_LABELS])


# ---------- small polygon helpers ----------

def polygon_area(pts) -> float:
    p = np.asarray(pts, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def is_convex(pts) -> bool:
    p = np.asarray(pts, dtype=float)
    e = np.roll(p, -1, axis=0) - p
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    cross = cross[np.abs(cross) > 1e-12]
    return bool(np.all(cross > 0) or np.all(cross < 0))


def points_in_convex_polygon(points, polygon) -> np.ndarray:
    """Boolean mask of ``points`` (N, 2) lying inside or on a convex polygon."""
    pts = np.asarray(points, dtype=float)
    poly = np.asarray(polygon, dtype=float)
    if polygon_area(poly) < 0:
        poly = poly[::-1]
    inside = np.ones(len(pts), dtype=bool)
    for p, q in zip(poly, np.roll(poly, -1, axis=0)):
        cross = (q[0] - p[0]) * (pts[:, 1] - p[1]) - (q[1] - p[1]) * (pts[:, 0] - p[0])
        inside &= cross >= -1e-9
    return inside


# ---------- raster I/O ----------

def write_raster(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype == np.uint8:
        tag = 0
    elif arr.dtype.kind == "f":
        tag = 1
    else:
        raise ValueError(f"unsupported raster dtype {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, ch = arr.shape
    payload = np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()
    with open(path, "wb") as f:
        f.write(RASTER_MAGIC + struct.pack("<IIBB", w, h, ch, tag) + payload)


def read_raster(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RASTER_MAGIC or len(data) < 14:
        raise SceneParseError(f"{path}: not an SVR1 raster")
    w, h, ch, tag = struct.unpack("<IIBB", data[4:14])
    if tag not in DTYPE_TAGS:
        raise SceneParseError(f"{path}: unknown dtype tag {tag}")
    dtype = DTYPE_TAGS[tag]
    expected = w * h * ch * dtype.itemsize
    if len(data) - 14 != expected:
        raise SceneParseError(f"{path}: payload is {len(data) - 14} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype=dtype, offset=14).reshape(h, w, ch)
    arr = arr.astype(dtype.newbyteorder("="))
    return arr[:, :, 0] if ch == 1 else arr


def write_ppm(path, rgb: np.ndarray) -> None:
    img = np.asarray(rgb)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SceneParseError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise SceneParseError(f"{path}: only binary P6 PPM with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    payload = data[pos + 1:]
    if len(payload) != w * h * 3:
        raise SceneParseError(f"{path}: PPM payload size mismatch")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """RGB image as floats in [0, 1] from a PPM or a 3-channel u8 SVR1 raster."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == RASTER_MAGIC:
        arr = read_raster(path)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise SceneParseError(f"{path}: background raster must be 3-channel u8")
    else:
        arr = read_ppm(path)
    return arr.astype(np.float64) / 255.0


# ---------- scenario files ----------

def _require(mapping, key, where):
    if key not in mapping:
        raise SceneParseError(f"{where}: missing key '{key}'")
    return mapping[key]


def _schedule_from(raw):
    if raw is None:
        return None
    return TrafficLightSchedule(float(raw["green_for_cars_s"]), float(raw["green_for_peds_s"]),
                                float(raw.get("offset_s", 0.0)))


def _check_crosswalk_arcs(crosswalks, lanes):
    for i, cw in enumerate(crosswalks):
        for lane_idx, stop in cw.stop_arcs.items():
            if not 0 <= lane_idx < len(lanes):
                raise SceneValidationError(f"crosswalks[{i}].stop_arcs", f"unknown lane {lane_idx}")
            lane = lanes[lane_idx]
            arcs = [lane.arc_of(p) for p in cw.polygon]
            if not stop < min(arcs):
                raise SceneValidationError(f"crosswalks[{i}].stop_arcs",
                                           f"stop line {stop:.2f} m is not before the crosswalk on lane {lane_idx}")


def validate_scene(scene: SceneDescription) -> None:
    """Raise SceneValidationError naming the first violated invariant."""
    shape = scene.intrinsics.shape
    for name, arr in (("labels", scene.labels), ("depth", scene.depth),
                      ("shadow_mask", scene.shadow_mask), ("background", scene.background)):
        if arr.shape[:2] != shape:
            raise SceneValidationError(name, f"raster is {arr.shape[1]}x{arr.shape[0]}, "
                                             f"camera is {shape[1]}x{shape[0]}")
    if scene.background.ndim != 3 or scene.background.shape[2] != 3:
        raise SceneValidationError("background", "must be an RGB raster")
    if scene.labels.min() < 0 or scene.labels.max() > max(Label):
        raise SceneValidationError("labels", "unknown label value")
    finite = np.isfinite(scene.depth)
    if np.isnan(scene.depth).any() or (scene.depth[finite] <= 0).any() or (scene.depth == -np.inf).any():
        raise SceneValidationError("depth", "finite depths must be positive")
    if not 0.0 < scene.drivable_threshold < 1.0:
        raise SceneValidationError("drivable_threshold", "must lie in (0, 1)")
    if scene.wall_depth_m is not None and not scene.wall_depth_m > 0:
        raise SceneValidationError("wall_depth_m", "must be positive")
    _check_crosswalk_arcs(scene.crosswalks, scene.lanes)


def load_scene(path) -> SceneDescription:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("format") != SCENE_FORMAT:
        raise SceneParseError(f"{path}: expected format '{SCENE_FORMAT}'")
    base = path.parent

    cam = _require(raw, "camera", path)
    intrinsics = CameraIntrinsics(float(_require(cam, "focal_length_px", "camera")),
                                  int(_require(cam, "width_px", "camera")),
                                  int(_require(cam, "height_px", "camera")))
    rasters = _require(raw, "rasters", path)
    labels = read_raster(base / _require(rasters, "labels", "rasters"))
    depth = read_raster(base / _require(rasters, "depth", "rasters"))
    shadow = read_raster(base / _require(rasters, "shadow_mask", "rasters"))
    background = read_image(base / _require(rasters, "background", "rasters"))
    if labels.dtype != np.uint8 or labels.ndim != 2:
        raise SceneValidationError("labels", "must be a single-channel u8 raster")
    if depth.dtype.kind != "f" or depth.ndim != 2:
        raise SceneValidationError("depth", "must be a single-channel f32 raster")

    light_raw = raw.get("lighting", {})
    lighting = Lighting(LightingMode(light_raw.get("mode", "diffuse")),
                        float(light_raw.get("sun_azimuth", 0.0)),
                        float(light_raw.get("sun_elevation", math.pi / 4)),
                        float(light_raw.get("directional_intensity", 0.8)),
                        float(light_raw.get("ambient_intensity", 0.35)))
    lanes = tuple(Lane(tuple(map(tuple, l["centerline"])), float(l.get("width_m", 3.5)))
                  for l in raw.get("lanes", []))
    crosswalks = tuple(Crosswalk(tuple(map(tuple, c["polygon"])), dict(c.get("stop_arcs", {})),
                                 _schedule_from(c.get("schedule")))
                       for c in raw.get("crosswalks", []))
    if shadow.ndim != 2:
        raise SceneValidationError("shadow_mask", "must be a single-channel raster")
    # existing shadows only count on ground pixels
    shadow_mask = (shadow > 0) & np.isin(labels, [int(l) for l in GROUND_LABELS])
    scene = SceneDescription(
        intrinsics=intrinsics, labels=labels, depth=depth.astype(np.float32), lighting=lighting,
        shadow_mask=shadow_mask, background=background,
        lanes=lanes, crosswalks=crosswalks,
        drivable_threshold=float(raw.get("drivable_threshold", DEFAULT_DRIVABLE_THRESHOLD)),
        wall_depth_m=raw.get("wall_depth_m"), name=raw.get("name", path.stem))
    validate_scene(scene)
    return scene


def save_scene(scene: SceneDescription, path) -> None:
    """Write the scenario file and its sidecar rasters next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    write_raster(path.parent / f"{stem}.labels.svr", scene.labels)
    write_raster(path.parent / f"{stem}.depth.svr", scene.depth.astype(np.float32))
    write_raster(path.parent / f"{stem}.shadow.svr", scene.shadow_mask)
    write_ppm(path.parent / f"{stem}.background.ppm", scene.background)
    light = scene.lighting
    doc = {
        "format": SCENE_FORMAT,
        "name": scene.name,
        "camera": dataclasses.asdict(scene.intrinsics),
        "rasters": {"labels": f"{stem}.labels.svr", "depth": f"{stem}.depth.svr",
                    "shadow_mask": f"{stem}.shadow.svr", "background": f"{stem}.background.ppm"},
        "lighting": {"mode": light.mode.value, "sun_azimuth": light.sun_azimuth,
                     "sun_elevation": light.sun_elevation,
                     "directional_intensity": light.directional_intensity,
                     "ambient_intensity": light.ambient_intensity},
        "drivable_threshold": scene.drivable_threshold,
        "wall_depth_m": scene.wall_depth_m,
        "lanes": [{"centerline": [list(p) for p in lane.centerline], "width_m": lane.width_m}
                  for lane in scene.lanes],
        "crosswalks": [{"polygon": [list(p) for p in cw.polygon],
                        "stop_arcs": {str(k): v for k, v in cw.stop_arcs.items()},
                        "schedule": None if cw.schedule is None else dataclasses.asdict(cw.schedule)}
                       for cw in scene.crosswalks],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
