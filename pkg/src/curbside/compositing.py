"""Frame synthesis: proxy layers, shadow/object masks, shadow matting and z-buffered
compositing over the background photo.

Images are float RGB in [0, 1]; depths are camera Z in meters.
"""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .geometry import (
    DEFAULT_OCCLUDER_HEIGHT, GroundFrame, ShadowOccluder, build_shadow_occluder, is_shadowed,
    plane_depth,
)
from .scene_model import (
    GROUND_LABELS, CameraIntrinsics, GroundPlane, Label, SceneDescription,
)

DEFAULT_SHADOW_FACTOR = np.array([0.45, 0.45, 0.50])
GROUND_GRAY = 0.5
PATCH_SIDE = 15


class CompositingError(Exception):
    pass


class TraceGapError(CompositingError):
    pass


class ProxyKind(str, enum.Enum):
    PEDESTRIAN = "ped"
    CAR = "car"


PROXY_SIZE = {  # (width across heading, length along heading, height)
    ProxyKind.PEDESTRIAN: (0.5, 0.5, 1.8),
    ProxyKind.CAR: (1.8, 4.5, 1.5),
}

PED_COLORS = np.array([[0.80, 0.25, 0.20], [0.20, 0.40, 0.80], [0.85, 0.70, 0.20],
                       [0.30, 0.65, 0.35], [0.60, 0.30, 0.65], [0.90, 0.50, 0.20]])
CAR_COLORS = np.array([[0.75, 0.75, 0.78], [0.15, 0.15, 0.18], [0.70, 0.10, 0.10],
                       [0.15, 0.30, 0.60]])


@dataclass(frozen=True)
class AgentProxy:
    kind: ProxyKind
    position: tuple          # footprint center in ground coordinates
    heading: tuple = (0.0, 1.0)
    albedo: tuple = (0.7, 0.7, 0.7)
    size: Optional[tuple] = None

    @property
    def dims(self) -> tuple:
        return self.size if self.size is not None else PROXY_SIZE[ProxyKind(self.kind)]

    @property
    def height(self) -> float:
        return self.dims[2]


@dataclass
class FrameBuffers:
    f_rgb: np.ndarray
    f_depth: np.ndarray
    m_s: np.ndarray
    m_o: np.ndarray
    matte: np.ndarray
    f_ws: np.ndarray
    f_final: np.ndarray


# ---------- ray casting ----------

def _box_frame(proxy: AgentProxy):
    u = np.asarray(proxy.heading, dtype=float)
    n = np.hypot(u[0], u[1])
    u = np.array([0.0, 1.0]) if n == 0 else u / n
    w = np.array([u[1], -u[0]])
    width, length, height = proxy.dims
    return np.asarray(proxy.position, dtype=float), u, w, np.array([length / 2, width / 2, height / 2])


def ray_box(origins, dirs, proxy: AgentProxy):
    """Slab test in ground coordinates. Returns (t_near, t_far, hit_axis, hit_sign)."""
    c, u, w, half = _box_frame(proxy)
    o = np.asarray(origins, dtype=float)
    d = np.asarray(dirs, dtype=float)
    rel = o - np.array([c[0], c[1], half[2]])
    axes = (np.array([u[0], u[1], 0.0]), np.array([w[0], w[1], 0.0]), np.array([0.0, 0.0, 1.0]))
    t_near = np.full(np.broadcast_shapes(o.shape, d.shape)[:-1], -np.inf)
    t_far = np.full_like(t_near, np.inf)
    axis_near = np.zeros(t_near.shape, dtype=np.int8)
    sign_near = np.zeros(t_near.shape)
    for k, ax in enumerate(axes):
        ok = rel @ ax
        dk = d @ ax
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[k] - ok) / dk
            t2 = (half[k] - ok) / dk
        parallel = np.abs(dk) < 1e-12
        inside = np.abs(ok) <= half[k]
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        better = lo > t_near
        axis_near = np.where(better, k, axis_near)
        sign_near = np.where(better, -np.sign(dk), sign_near)
        t_near = np.maximum(t_near, lo)
        t_far = np.minimum(t_far, hi)
    return t_near, t_far, axis_near, sign_near


def shadow_hits(points, sun, proxies) -> np.ndarray:
    """True where the ray from ground-frame ``points`` (x, y, up) toward ``sun`` hits a proxy."""
    pts = np.asarray(points, dtype=float)
    out = np.zeros(pts.shape[:-1], dtype=bool)
    for proxy in proxies:
        t_near, t_far, _, _ = ray_box(pts, sun, proxy)
        out |= (t_far >= np.maximum(t_near, 0.0)) & (t_far > 1e-9)
    return out


class SceneRenderer:
    """Per-scene constants reused for every frame."""

    def __init__(self, scene: SceneDescription, plane: GroundPlane,
                 occluder: ShadowOccluder | None = None, blur_sigma: float | None = None,
                 shadow_factor=None, occluder_height: float = DEFAULT_OCCLUDER_HEIGHT):
        self.scene = scene
        self.plane = plane
        self.intr = scene.intrinsics
        self.lighting = scene.lighting
        self.frame = GroundFrame.from_plane(plane)
        xs, ys = self.intr.pixel_centers()
        f = self.intr.focal_length_px
        cam_dirs = np.stack([xs / f, ys / f, np.ones_like(xs)], axis=-1)
        fr = self.frame
        self.dirs = np.stack([cam_dirs @ fr.e_x, cam_dirs @ fr.e_y, -(cam_dirs @ fr.normal)], axis=-1)
        self.camera = np.array([0.0, 0.0, fr.distance])
        z_ground = plane_depth(xs, ys, self.intr, plane)
        z_wall = np.full_like(z_ground, np.inf) if scene.wall_depth_m is None \
            else np.full_like(z_ground, float(scene.wall_depth_m))
        self.on_ground = np.isfinite(z_ground) & (z_ground <= z_wall)
        self.on_wall = np.isfinite(z_wall) & ~self.on_ground
        self.surface_depth = np.minimum(z_ground, z_wall)
        self.surface_points = self.camera + self.surface_depth[..., None] * self.dirs
        labels = scene.labels
        ground_labels = np.isin(labels, [int(l) for l in GROUND_LABELS])
        self.receiver = (self.on_ground & ground_labels) | (self.on_wall & (labels == Label.WALL))
        self.d_bg = refine_background_depth(scene.depth, labels, plane, self.intr)
        self.existing_shadow = np.asarray(scene.shadow_mask, dtype=bool)
        if shadow_factor is None:
            shadow_factor = shadow_color_factor(scene.background, self.existing_shadow, ground_labels)
        self.shadow_factor = np.asarray(shadow_factor, dtype=float)
        if blur_sigma is None:
            blur_sigma = 1.5 if self.lighting.directional else 6.0
        self.blur_sigma = blur_sigma
        if occluder is None and self.lighting.directional and self.existing_shadow.any():
            occluder = build_shadow_occluder(self.existing_shadow, plane, self.intr, self.lighting,
                                             occluder_height)
        self.occluder = occluder
        self.base_rgb = np.ones(self.intr.shape + (3,))
        self.base_rgb[self.on_ground | self.on_wall] = GROUND_GRAY

    def sun(self) -> np.ndarray:
        return self.lighting.sun_vector()

    def rasterize_layers(self, proxies):
        return rasterize_layers(proxies, self)

    def render(self, proxies) -> FrameBuffers:
        f_rgb, f_depth = self.rasterize_layers(proxies)
        m_s, m_o = extract_masks(f_rgb, f_depth, self.base_rgb, self.receiver)
        f_ws, matte = composite_shadow(self.scene.background, f_rgb, m_s, m_o, self.shadow_factor,
                                       self.existing_shadow, self.blur_sigma, self.receiver)
        f_final = composite_final(f_ws, f_depth, self.d_bg, self.scene.background)
        return FrameBuffers(f_rgb, f_depth, m_s, m_o, matte, f_ws, f_final)


def rasterize_layers(proxies, renderer: SceneRenderer):
    """Color layer (shaded proxies, black hard shadows, gray ground, white sky) and a
    proxy-only depth layer (+inf elsewhere)."""
    shape = renderer.intr.shape
    f_rgb = renderer.base_rgb.copy()
    f_depth = np.full(shape, np.inf)
    sun = renderer.sun()
    light = renderer.lighting
    if proxies:
        receivers = renderer.on_ground | renderer.on_wall
        shadowed = np.zeros(shape, dtype=bool)
        shadowed[receivers] = shadow_hits(renderer.surface_points[receivers], sun, proxies)
        f_rgb[shadowed] = 0.0
    occ = renderer.occluder
    for proxy in proxies:
        if proxy.height >= (occ.height if occ is not None else DEFAULT_OCCLUDER_HEIGHT):
            raise CompositingError("proxy is taller than the shadow occluder plane")
        t_near, t_far, axis, sign = ray_box(renderer.camera, renderer.dirs, proxy)
        hit = (t_near <= t_far) & (t_near > 0)
        closer = hit & (t_near < f_depth) & (t_near <= renderer.surface_depth + 1e-9)
        if not closer.any():
            continue
        _, u, w, _ = _box_frame(proxy)
        normals = np.array([[u[0], u[1], 0.0], [w[0], w[1], 0.0], [0.0, 0.0, 1.0]])
        n = normals[axis[closer]] * sign[closer][:, None]
        lit = np.maximum(0.0, n @ sun)
        in_scene_shadow = occ is not None and light.directional and bool(
            is_shadowed(np.asarray(proxy.position, dtype=float), proxy.height, occ, light))
        direct = 0.0 if in_scene_shadow else light.directional_intensity
        shade = light.ambient_intensity + direct * lit
        f_rgb[closer] = np.clip(np.asarray(proxy.albedo)[None, :] * shade[:, None], 0.0, 1.0)
        f_depth[closer] = t_near[closer]
    return f_rgb, f_depth


def extract_masks(f_rgb, f_depth, base_rgb=None, receiver=None):
    """M_o marks proxy pixels; M_s marks receiver pixels the shadow layer darkened."""
    m_o = np.isfinite(f_depth)
    if base_rgb is None:
        changed = np.zeros(m_o.shape, dtype=bool)
    else:
        changed = np.any(f_rgb != base_rgb, axis=-1)
    m_s = changed & ~m_o
    if receiver is not None:
        m_s &= receiver
    return m_s, m_o


def _largest_square(mask: np.ndarray):
    """(side, row, col) of the largest all-true axis-aligned square; first found wins ties."""
    h, w = mask.shape
    prev = np.zeros(w + 1, dtype=np.int32)
    best = (0, 0, 0)
    for i in range(h):
        cur = np.zeros(w + 1, dtype=np.int32)
        row = mask[i]
        for j in range(w):
            if row[j]:
                v = min(prev[j], prev[j + 1], cur[j]) + 1
                cur[j + 1] = v
                if v > best[0]:
                    best = (int(v), i - v + 1, j - v + 1)
        prev = cur
    return best


def shadow_color_factor(background, shadow_mask, ground, patch_side: int = PATCH_SIDE,
                        default=DEFAULT_SHADOW_FACTOR, clamp=(0.2, 0.95)) -> np.ndarray:
    """Per-channel shadowed/lit ratio from the largest square patch inside each region."""
    shadow = np.asarray(shadow_mask, dtype=bool) & ground
    lit = np.asarray(ground, dtype=bool) & ~shadow
    side_s, r_s, c_s = _largest_square(shadow)
    side_l, r_l, c_l = _largest_square(lit)
    if side_s < patch_side or side_l < patch_side:
        return np.array(default, dtype=float)
    b = np.asarray(background, dtype=float)
    dark = b[r_s:r_s + side_s, c_s:c_s + side_s].reshape(-1, 3).mean(axis=0)
    bright = b[r_l:r_l + side_l, c_l:c_l + side_l].reshape(-1, 3).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bright > 0, dark / bright, default)
    return np.clip(ratio, *clamp)


def composite_shadow(background, f_rgb, m_s, m_o, s, existing_shadow=None, blur_sigma: float = 1.5,
                     receiver=None):
    """Darken the background under a soft shadow matte; proxies keep their own color.

    Returns (f_ws, matte).
    """
    ms = np.asarray(m_s, dtype=bool)
    if existing_shadow is not None:
        ms = ms & ~existing_shadow
    matte = ms.astype(float)
    if blur_sigma and blur_sigma > 0:
        matte = ndimage.gaussian_filter(matte, blur_sigma, mode="constant")
    matte[matte < 1e-9] = 0.0
    matte[matte > 1.0 - 1e-9] = 1.0
    if existing_shadow is not None:
        matte[existing_shadow] = 0.0
    if receiver is not None:
        matte[~receiver] = 0.0
    m_o = np.asarray(m_o, dtype=bool)
    matte[m_o] = 0.0
    b = np.asarray(background, dtype=float)
    s = np.asarray(s, dtype=float)
    m = matte[..., None]
    f_ws = b * (1.0 - m) + b * s * m
    f_ws[m_o] = f_rgb[m_o]
    return f_ws, matte


def refine_background_depth(depth, labels, plane: GroundPlane, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Ground pixels get exact plane depth; each vertical obstacle run gets the plane depth
    at its ground contact."""
    d = np.asarray(depth, dtype=float).copy()
    xs, ys = intrinsics.pixel_centers()
    ground = np.isin(labels, [int(l) for l in GROUND_LABELS])
    d[ground] = plane_depth(xs[ground], ys[ground], intrinsics, plane)
    obst = labels == Label.OBSTACLE
    h = intrinsics.height_px
    for col in np.flatnonzero(obst.any(axis=0)):
        column = obst[:, col]
        edges = np.diff(np.concatenate([[0], column.astype(np.int8), [0]]))
        starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
        x = col + 0.5 - intrinsics.width_px / 2.0
        for r0, r1 in zip(starts, ends):
            contact = plane_depth(x, r1 - h / 2.0, intrinsics, plane)
            if np.isfinite(contact):
                d[r0:r1, col] = contact
    return d


def composite_final(f_ws, f_depth, d_bg, background) -> np.ndarray:
    """Z-test proxy pixels against the refined background; non-proxy pixels keep f_ws."""
    obj = np.isfinite(f_depth)
    visible = obj & (f_depth <= d_bg)
    out = np.where(obj[..., None], np.where(visible[..., None], f_ws, background), f_ws)
    return out


# ---------- video ----------

def _smoothed_headings(track: dict, window: int = 5) -> dict:
    ticks = sorted(track)
    pts = np.array([track[t] for t in ticks])
    half = window // 2
    smooth = np.array([pts[max(0, k - half):k + half + 1].mean(axis=0) for k in range(len(pts))])
    headings = {}
    for k, t in enumerate(ticks):
        a, b = smooth[max(0, k - 1)], smooth[min(len(ticks) - 1, k + 1)]
        v = b - a
        headings[t] = tuple(v / np.hypot(*v)) if np.hypot(*v) > 1e-9 else None
    # hold the last known heading while standing still
    last = (0.0, 1.0)
    for t in ticks:
        if headings[t] is None:
            headings[t] = last
        last = headings[t]
    return headings


def proxies_by_tick(rows, lanes=()) -> dict:
    """Group trace rows into per-tick proxy lists; raises TraceGapError on broken tracks."""
    tracks = defaultdict(dict)
    for r in rows:
        tracks[(r.kind, r.id)][r.tick] = (r.x, r.y)
    lane_of = {(r.kind, r.id): r.lane for r in rows if r.kind == "car"}
    frames = defaultdict(list)
    for (kind, ident), track in sorted(tracks.items()):
        ticks = sorted(track)
        if ticks[-1] - ticks[0] + 1 != len(ticks):
            raise TraceGapError(f"{kind} {ident} is missing ticks between {ticks[0]} and {ticks[-1]}")
        if kind == "car":
            lane = lane_of.get((kind, ident))
            if lane is not None and lanes and 0 <= lane < len(lanes):
                heads = {t: tuple(lanes[lane].direction_at(lanes[lane].arc_of(track[t]))) for t in ticks}
            else:
                heads = _smoothed_headings(track)
            albedo = tuple(CAR_COLORS[ident % len(CAR_COLORS)])
            pkind = ProxyKind.CAR
        else:
            heads = _smoothed_headings(track)
            albedo = tuple(PED_COLORS[ident % len(PED_COLORS)])
            pkind = ProxyKind.PEDESTRIAN
        for t in ticks:
            frames[t].append(AgentProxy(pkind, track[t], heads[t], albedo))
    return frames


def render_video(renderer: SceneRenderer, rows, n_ticks: int | None = None, ticks_per_frame: int = 1,
                 lanes=()):
    """Yield (tick, FrameBuffers) for every rendered tick."""
    frames = proxies_by_tick(rows, lanes)
    if n_ticks is None:
        n_ticks = (max(frames) + 1) if frames else 0
    for tick in range(0, n_ticks, max(1, ticks_per_frame)):
        yield tick, renderer.render(frames.get(tick, []))
