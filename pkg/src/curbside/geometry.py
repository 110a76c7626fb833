"""Ground plane fitting, pixel/ground conversions, BEV world construction and the
shadow occluder.

Ground coordinates are a metric 2D frame lying in the ground plane: the origin is
the foot of the camera, +y points along the camera's viewing direction projected
onto the plane and +x to the camera's right. Heights are measured upward from the
plane. BEV grids index cells as ``[row, col]`` with the center of cell ``(i, j)``
at ``origin + (j * cell_size, i * cell_size)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .scene_model import (
    CameraIntrinsics, GroundPlane, Label, Lighting, SceneDescription,
    points_in_convex_polygon,
)

DEFAULT_CELL_SIZE = 0.25
DEFAULT_DILATION_CELLS = 2
DEFAULT_OBSTACLE_RADIUS_CELLS = 1
DEFAULT_OCCLUDER_HEIGHT = 3.0
DEFAULT_MAX_DEPTH = 30.0


class GeometryError(Exception):
    pass


class RankDeficientError(GeometryError):
    pass


class HorizonError(GeometryError):
    pass


class EmptyWorldError(GeometryError):
    pass


class OccluderNotApplicableError(GeometryError):
    pass


class SceneKind(enum.Enum):
    PEDESTRIAN_ONLY = "pedestrian_only"
    MIXED = "mixed"


# ---------- ground plane ----------

def fit_plane_coefficients(samples, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Least-squares (a, b, c) of (a/f) x + (b/f) y + c = 1/Z over center-relative pixel samples."""
    s = np.asarray(samples, dtype=float).reshape(-1, 3)
    if len(s) < 3:
        raise RankDeficientError("need at least three samples")
    if not np.all(np.isfinite(s[:, 2])) or np.any(s[:, 2] <= 0):
        raise ValueError("sample depths must be finite and positive")
    f = intrinsics.focal_length_px
    design = np.column_stack([s[:, 0] / f, s[:, 1] / f, np.ones(len(s))])
    rhs = 1.0 / s[:, 2]
    # column scaling keeps the conditioning check meaningful
    scale = np.linalg.norm(design, axis=0)
    scale[scale == 0] = 1.0
    sv = np.linalg.svd(design / scale, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise RankDeficientError("samples are collinear in the image; plane is undetermined")
    coef, *_ = np.linalg.lstsq(design / scale, rhs, rcond=None)
    return coef / scale


def fit_ground_plane(samples, intrinsics: CameraIntrinsics) -> GroundPlane:
    """Fitted plane, validated as ground (rejects walls and other steep planes)."""
    a, b, c = fit_plane_coefficients(samples, intrinsics)
    return GroundPlane(float(a), float(b), float(c))


def plane_samples(scene: SceneDescription, labels=(Label.ROAD, Label.SIDEWALK, Label.CROSSWALK)):
    """(x_px, y_px, Z) samples from ground-labeled pixels with finite depth."""
    xs, ys = scene.intrinsics.pixel_centers()
    mask = np.isin(scene.labels, [int(l) for l in labels]) & np.isfinite(scene.depth)
    return np.column_stack([xs[mask], ys[mask], scene.depth[mask].astype(float)])


def fit_scene_plane(scene: SceneDescription) -> GroundPlane:
    return fit_ground_plane(plane_samples(scene), scene.intrinsics)


def plane_residual(plane: GroundPlane, samples, intrinsics: CameraIntrinsics) -> float:
    s = np.asarray(samples, dtype=float)
    f = intrinsics.focal_length_px
    r = plane.a / f * s[:, 0] + plane.b / f * s[:, 1] + plane.c - 1.0 / s[:, 2]
    return float(np.dot(r, r))


@dataclass(frozen=True)
class GroundFrame:
    """Orthonormal ground frame derived from a plane."""

    normal: np.ndarray     # unit normal, pointing from the camera toward the plane
    distance: float        # camera height above the plane
    e_x: np.ndarray
    e_y: np.ndarray

    @classmethod
    def from_plane(cls, plane: GroundPlane) -> "GroundFrame":
        coef = plane.coefficients
        norm = float(np.linalg.norm(coef))
        n = coef / norm
        forward = np.array([0.0, 0.0, 1.0]) - n[2] * n
        if np.linalg.norm(forward) < 1e-9:
            raise GeometryError("camera looks straight along the plane normal")
        e_y = forward / np.linalg.norm(forward)
        e_x = np.cross(n, e_y)
        return cls(n, 1.0 / norm, e_x, e_y)

    @property
    def foot(self) -> np.ndarray:
        return self.normal * self.distance

    def to_camera(self, ground_xy, height=0.0) -> np.ndarray:
        g = np.asarray(ground_xy, dtype=float)
        h = np.asarray(height, dtype=float)
        return (self.foot + g[..., 0, None] * self.e_x + g[..., 1, None] * self.e_y
                - h[..., None] * self.normal)

    def from_camera(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Camera points to (ground_xy, height)."""
        p = np.asarray(points, dtype=float)
        rel = p - self.foot
        xy = np.stack([rel @ self.e_x, rel @ self.e_y], axis=-1)
        return xy, -(rel @ self.normal)

    def to_camera_direction(self, v) -> np.ndarray:
        """Direction (x, y, up) in ground coordinates to camera coordinates."""
        v = np.asarray(v, dtype=float)
        return v[..., 0, None] * self.e_x + v[..., 1, None] * self.e_y - v[..., 2, None] * self.normal


def _ray_depths(x_px, y_px, intrinsics, plane):
    f = intrinsics.focal_length_px
    return (plane.a * np.asarray(x_px, dtype=float) + plane.b * np.asarray(y_px, dtype=float)) / f + plane.c


def pixels_to_ground(x_px, y_px, intrinsics: CameraIntrinsics, plane: GroundPlane,
                     min_denominator: float = 1e-9):
    """Vectorized ray/plane intersection; returns (ground_xy, Z, valid)."""
    x = np.asarray(x_px, dtype=float)
    y = np.asarray(y_px, dtype=float)
    denom = _ray_depths(x, y, intrinsics, plane)
    valid = denom > min_denominator
    z = np.where(valid, 1.0 / np.where(valid, denom, 1.0), np.inf)
    f = intrinsics.focal_length_px
    zs = np.where(valid, z, 0.0)
    pts = np.stack([x * zs / f, y * zs / f, zs], axis=-1)
    xy, _ = GroundFrame.from_plane(plane).from_camera(pts)
    xy[~valid] = np.nan
    return xy, z, valid


def pixel_to_ground(x_px: float, y_px: float, intrinsics: CameraIntrinsics, plane: GroundPlane) -> np.ndarray:
    """Ground point seen at center-relative pixel (x_px, y_px)."""
    xy, _, valid = pixels_to_ground(x_px, y_px, intrinsics, plane)
    if not bool(valid):
        raise HorizonError(f"pixel ({x_px}, {y_px}) does not see the ground in front of the camera")
    return xy


def ground_to_pixel(ground_xy, intrinsics: CameraIntrinsics, plane: GroundPlane, height=0.0):
    """Project ground point(s) at ``height`` to center-relative pixels; returns (x, y, Z)."""
    p = GroundFrame.from_plane(plane).to_camera(ground_xy, height)
    z = p[..., 2]
    f = intrinsics.focal_length_px
    with np.errstate(divide="ignore", invalid="ignore"):
        return f * p[..., 0] / z, f * p[..., 1] / z, z


def plane_depth(x_px, y_px, intrinsics, plane):
    """Depth Z where each pixel ray meets the plane (+inf above the horizon)."""
    denom = _ray_depths(x_px, y_px, intrinsics, plane)
    with np.errstate(divide="ignore"):
        return np.where(denom > 1e-9, 1.0 / np.where(denom > 1e-9, denom, 1.0), np.inf)


# ---------- BEV world ----------

@dataclass(frozen=True, eq=False)
class BevGrid:
    cell_size: float
    origin: np.ndarray
    walkable: np.ndarray
    obstacle: np.ndarray
    component_id: np.ndarray
    hulls: tuple = ()
    edge: np.ndarray | None = None      # walkable cells on the image boundary
    crosswalk: np.ndarray | None = None  # cells inside any crosswalk polygon
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        if np.any(self.obstacle & self.walkable):
            raise GeometryError("obstacle cells must not be walkable")

    @property
    def shape(self):
        return self.walkable.shape

    def cell_centers(self) -> np.ndarray:
        ny, nx = self.shape
        jj, ii = np.meshgrid(np.arange(nx), np.arange(ny))
        return np.stack([self.origin[0] + jj * self.cell_size, self.origin[1] + ii * self.cell_size], axis=-1)

    def center(self, cell) -> np.ndarray:
        i, j = cell
        return self.origin + np.array([j, i], dtype=float) * self.cell_size

    def cell_of(self, point) -> tuple[int, int]:
        q = (np.asarray(point, dtype=float) - self.origin) / self.cell_size
        return int(math.floor(q[1] + 0.5)), int(math.floor(q[0] + 0.5))

    def contains(self, cell) -> bool:
        i, j = cell
        return 0 <= i < self.shape[0] and 0 <= j < self.shape[1]

    def is_walkable(self, point) -> bool:
        c = self.cell_of(point)
        return self.contains(c) and bool(self.walkable[c])

    @classmethod
    def from_masks(cls, walkable, obstacle=None, cell_size=DEFAULT_CELL_SIZE, origin=(0.0, 0.0),
                   edge=None, crosswalk=None):
        """Grid built directly from boolean masks; components are 8-connected regions."""
        walkable = np.asarray(walkable, dtype=bool)
        obstacle = np.zeros_like(walkable) if obstacle is None else np.asarray(obstacle, dtype=bool)
        walkable = walkable & ~obstacle
        labels, _ = ndimage.label(walkable, structure=np.ones((3, 3)))
        return cls(cell_size, np.asarray(origin, dtype=float), walkable, obstacle, labels - 1,
                   edge=edge, crosswalk=crosswalk)

    def regions(self) -> np.ndarray:
        """4-connected reachability regions of the walkable cells (-1 elsewhere)."""
        labels, _ = ndimage.label(self.walkable)
        return labels - 1


def classify_scene(labels: np.ndarray, drivable_threshold: float) -> SceneKind:
    fraction = float(np.count_nonzero(labels == Label.ROAD)) / labels.size
    return SceneKind.PEDESTRIAN_ONLY if fraction < drivable_threshold else SceneKind.MIXED


def _disk(radius_cells: int) -> np.ndarray:
    r = int(radius_cells)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx ** 2 + yy ** 2 <= r * r + 1e-9


def _hull_cells(component: np.ndarray, dilation: int):
    """Dilate a component, then fill the convex hull of the dilated cell centers."""
    grown = ndimage.binary_dilation(component, structure=_disk(dilation)) if dilation > 0 else component
    ii, jj = np.nonzero(grown)
    pts = np.column_stack([jj, ii]).astype(float)
    try:
        hull = ConvexHull(pts)
    except QhullError:
        return grown, pts
    poly = pts[hull.vertices]
    i0, i1, j0, j1 = ii.min(), ii.max(), jj.min(), jj.max()
    sub_j, sub_i = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
    cand = np.column_stack([sub_j.ravel(), sub_i.ravel()]).astype(float)
    inside = points_in_convex_polygon(cand, poly).reshape(sub_i.shape)
    out = np.zeros_like(component)
    out[i0:i1 + 1, j0:j1 + 1] = inside
    return out | grown, poly


def build_bev(scene: SceneDescription, plane: GroundPlane, cell_size: float = DEFAULT_CELL_SIZE,
              kind: SceneKind | None = None, dilation_cells: int = DEFAULT_DILATION_CELLS,
              obstacle_radius_cells: int = DEFAULT_OBSTACLE_RADIUS_CELLS,
              max_depth: float = DEFAULT_MAX_DEPTH) -> BevGrid:
    """Project walkable labels to a BEV grid, hull each component, and mark obstacles."""
    intr = scene.intrinsics
    labels = scene.labels
    if kind is None:
        kind = classify_scene(labels, scene.drivable_threshold)
    walk_labels = [Label.SIDEWALK]
    if kind is SceneKind.PEDESTRIAN_ONLY:
        walk_labels.append(Label.ROAD)
    walk_px = np.isin(labels, [int(l) for l in walk_labels])
    cross_px = labels == Label.CROSSWALK
    if not (walk_px.any() or cross_px.any()):
        raise EmptyWorldError("no walkable pixels in the scene")

    xs, ys = intr.pixel_centers()
    ground_px = walk_px | cross_px | (labels == Label.ROAD)
    gxy, gz, gvalid = pixels_to_ground(xs[ground_px], ys[ground_px], intr, plane)
    keep = gvalid & (gz <= max_depth)
    if not keep.any():
        raise EmptyWorldError("walkable pixels do not project onto the ground")
    pad = (dilation_cells + 2) * cell_size
    lo = np.floor((gxy[keep].min(axis=0) - pad) / cell_size) * cell_size
    hi = np.ceil((gxy[keep].max(axis=0) + pad) / cell_size) * cell_size
    nx = int(round((hi[0] - lo[0]) / cell_size)) + 1
    ny = int(round((hi[1] - lo[1]) / cell_size)) + 1

    grid = BevGrid(cell_size, lo, np.zeros((ny, nx), bool), np.zeros((ny, nx), bool),
                   -np.ones((ny, nx), int))
    centers = grid.cell_centers()
    px, py, pz = ground_to_pixel(centers, intr, plane)
    col, row = intr.to_index(px, py)
    col_i = np.floor(np.nan_to_num(col, nan=-1e9) + 0.5).astype(np.int64)
    row_i = np.floor(np.nan_to_num(row, nan=-1e9) + 0.5).astype(np.int64)
    in_image = (np.isfinite(pz) & (pz > 0) & (col_i >= 0) & (col_i < intr.width_px)
                & (row_i >= 0) & (row_i < intr.height_px))
    in_view = in_image & (pz <= max_depth)
    cell_label = np.full((ny, nx), -1, dtype=int)
    cell_label[in_view] = labels[row_i[in_view], col_i[in_view]]

    sidewalk = np.isin(cell_label, [int(l) for l in walk_labels])
    crosswalk_cells = cell_label == Label.CROSSWALK
    for cw in scene.crosswalks:
        crosswalk_cells |= points_in_convex_polygon(centers.reshape(-1, 2), cw.polygon).reshape(ny, nx)

    walkable = np.zeros((ny, nx), bool)
    component = -np.ones((ny, nx), int)
    hulls = []
    eight = np.ones((3, 3))
    next_id = 0
    for mask, dil in ((sidewalk & ~crosswalk_cells, dilation_cells), (crosswalk_cells, 0)):
        comp_labels, n = ndimage.label(mask, structure=eight)
        for k in range(1, n + 1):
            cells, poly = _hull_cells(comp_labels == k, dil)
            if mask is crosswalk_cells:
                cells = comp_labels == k
            component[cells & (component < 0)] = next_id
            walkable |= cells
            hulls.append(poly * cell_size + lo)
            next_id += 1

    obstacle = np.zeros((ny, nx), bool)
    for point in obstacle_contacts(scene, plane, max_depth):
        i, j = grid.cell_of(point)
        if 0 <= i < ny and 0 <= j < nx:
            obstacle[i, j] = True
    if obstacle.any() and obstacle_radius_cells > 0:
        obstacle = ndimage.binary_dilation(obstacle, structure=_disk(obstacle_radius_cells))
    walkable &= ~obstacle
    component[~walkable] = -1
    if not walkable.any():
        raise EmptyWorldError("no walkable BEV cells")

    # walkable cells next to a cell outside the left/right/bottom image border
    outside = ~in_image
    border = np.ones((ny + 2, nx + 2), bool)
    border[1:-1, 1:-1] = outside
    near_border = (border[:-2, 1:-1] | border[2:, 1:-1] | border[1:-1, :-2] | border[1:-1, 2:])
    edge = walkable & ~crosswalk_cells & near_border
    return BevGrid(cell_size, lo, walkable, obstacle, component, tuple(hulls), edge,
                   crosswalk_cells & walkable, {"kind": kind.value})


def obstacle_contacts(scene: SceneDescription, plane: GroundPlane, max_depth=DEFAULT_MAX_DEPTH):
    """Ground points below the lowest pixel of every vertical run of obstacle pixels."""
    labels = scene.labels
    obst = labels == Label.OBSTACLE
    below = np.zeros_like(obst)
    below[:-1] = labels[1:] != Label.OBSTACLE
    below[-1] = True
    rows, cols = np.nonzero(obst & below)
    if len(rows) == 0:
        return np.zeros((0, 2))
    intr = scene.intrinsics
    x = cols + 0.5 - intr.width_px / 2.0
    y = rows + 1.0 - intr.height_px / 2.0
    xy, z, valid = pixels_to_ground(x, y, intr, plane)
    return xy[valid & (z <= max_depth)]


def convex_hull_polygon(cells: np.ndarray) -> np.ndarray:
    ii, jj = np.nonzero(cells)
    pts = np.column_stack([jj, ii]).astype(float)
    return pts[ConvexHull(pts).vertices]


# ---------- shadow occluder ----------

@dataclass(frozen=True, eq=False)
class ShadowOccluder:
    height: float
    cell_size: float
    origin: np.ndarray
    mask: np.ndarray
    offset: np.ndarray      # ground -> occluder translation along the sun direction

    def cell_of(self, points) -> tuple[np.ndarray, np.ndarray]:
        q = (np.asarray(points, dtype=float) - self.origin) / self.cell_size
        return np.floor(q[..., 1] + 0.5).astype(int), np.floor(q[..., 0] + 0.5).astype(int)

    def lookup(self, points) -> np.ndarray:
        i, j = self.cell_of(points)
        ok = (i >= 0) & (i < self.mask.shape[0]) & (j >= 0) & (j < self.mask.shape[1])
        out = np.zeros(np.shape(i), dtype=bool)
        out[ok] = self.mask[i[ok], j[ok]]
        return out


def _sun_offset(lighting: Lighting, rise: float) -> np.ndarray:
    """Horizontal displacement of a ray toward the sun after climbing ``rise`` meters."""
    el, az = lighting.sun_elevation, lighting.sun_azimuth
    run = rise * math.cos(el) / math.sin(el)
    return np.array([run * math.cos(az), run * math.sin(az)])


def build_shadow_occluder(shadow_mask: np.ndarray, plane: GroundPlane, intrinsics: CameraIntrinsics,
                          lighting: Lighting, height: float = DEFAULT_OCCLUDER_HEIGHT,
                          cell_size: float = DEFAULT_CELL_SIZE, max_depth: float = DEFAULT_MAX_DEPTH,
                          closing_cells: int = 1) -> ShadowOccluder:
    """Lift shadowed ground points along the sun direction onto a plane ``height`` m up."""
    if not lighting.directional:
        raise OccluderNotApplicableError("diffuse lighting casts no scene shadows")
    offset = _sun_offset(lighting, height)
    xs, ys = intrinsics.pixel_centers()
    mask = np.asarray(shadow_mask, dtype=bool)
    gxy, gz, ok = pixels_to_ground(xs[mask], ys[mask], intrinsics, plane)
    ok &= gz <= max_depth
    hits = gxy[ok] + offset
    if len(hits) == 0:
        return ShadowOccluder(height, cell_size, np.zeros(2), np.zeros((1, 1), bool), offset)

    pad = (closing_cells + 1) * cell_size
    lo = np.floor((hits.min(axis=0) - pad) / cell_size) * cell_size
    hi = np.ceil((hits.max(axis=0) + pad) / cell_size) * cell_size
    nx = int(round((hi[0] - lo[0]) / cell_size)) + 1
    ny = int(round((hi[1] - lo[1]) / cell_size)) + 1
    occ = ShadowOccluder(height, cell_size, lo, np.zeros((ny, nx), bool), offset)
    ii, jj = occ.cell_of(hits)
    occ.mask[ii, jj] = True

    # back-project occluder cells so that sparse far-field samples still form a surface
    jjg, iig = np.meshgrid(np.arange(nx), np.arange(ny))
    centers = np.stack([lo[0] + jjg * cell_size, lo[1] + iig * cell_size], axis=-1) - offset
    px, py, pz = ground_to_pixel(centers, intrinsics, plane)
    col, row = intrinsics.to_index(px, py)
    good = np.isfinite(pz) & (pz > 0) & np.isfinite(col) & np.isfinite(row)
    ci = np.floor(np.where(good, col, -1) + 0.5).astype(int)
    ri = np.floor(np.where(good, row, -1) + 0.5).astype(int)
    good &= (ci >= 0) & (ci < intrinsics.width_px) & (ri >= 0) & (ri < intrinsics.height_px)
    occ.mask[good] |= mask[ri[good], ci[good]]
    if closing_cells > 0:
        closed = ndimage.binary_closing(occ.mask, structure=_disk(closing_cells))
        occ.mask[:] |= closed
    return occ


def is_shadowed(point, height_m, occluder: ShadowOccluder, lighting: Lighting):
    """True where the ray from (point, height) toward the sun hits the occluder."""
    if not lighting.directional:
        return np.zeros(np.shape(point)[:-1], dtype=bool) if np.ndim(point) > 1 else False
    h = np.asarray(height_m, dtype=float)
    p = np.asarray(point, dtype=float)
    rise = occluder.height - h
    el, az = lighting.sun_elevation, lighting.sun_azimuth
    run = rise * math.cos(el) / math.sin(el)
    hit = p + np.stack([run * math.cos(az), run * math.sin(az)], axis=-1)
    out = occluder.lookup(hit)
    return bool(out) if out.ndim == 0 else out
