import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import Delaunay

from curbside.geometry import (
    BevGrid, EmptyWorldError, HorizonError, OccluderNotApplicableError, RankDeficientError,
    SceneKind, ShadowOccluder, build_bev, build_shadow_occluder, classify_scene,
    fit_ground_plane, fit_plane_coefficients, fit_scene_plane, ground_to_pixel, is_shadowed,
    pixel_to_ground, pixels_to_ground, plane_residual,
)
from curbside.scene_model import (
    CameraIntrinsics, GroundPlane, Label, Lighting, LightingMode, SceneValidationError,
)
from curbside.scenes import Layout, rect, render_layout

from conftest import flat_scene

INTR = CameraIntrinsics(170.0, 192, 144)


def synth_samples(coef, intr, n, rng):
    a, b, c = coef
    f = intr.focal_length_px
    out = []
    while len(out) < n:
        x = rng.uniform(-intr.width_px / 2, intr.width_px / 2)
        y = rng.uniform(-intr.height_px / 2, intr.height_px / 2)
        inv = (a * x + b * y) / f + c
        if inv > 1e-3:
            out.append((x, y, 1.0 / inv))
    return np.array(out)


def test_exact_plane_recovery():
    coef = np.array([0.0, 0.667, 0.001])
    s = synth_samples(coef, INTR, 200, np.random.default_rng(1))
    plane = fit_ground_plane(s, INTR)
    assert np.allclose(plane.coefficients, coef, rtol=1e-9, atol=1e-12)


def test_constant_depth_samples():
    xs, ys = np.meshgrid(np.linspace(-40, 40, 5), np.linspace(-30, 30, 4))
    s = np.column_stack([xs.ravel(), ys.ravel(), np.full(xs.size, 10.0)])
    a, b, c = fit_plane_coefficients(s, INTR)
    assert abs(a) < 1e-12 and abs(b) < 1e-12 and c == pytest.approx(0.1, rel=1e-12)
    # a plane facing the camera is a wall, not ground
    with pytest.raises(SceneValidationError):
        fit_ground_plane(s, INTR)


def test_collinear_samples_are_rank_deficient():
    s = np.array([[0.0, 10.0, 5.0], [10.0, 20.0, 4.0], [20.0, 30.0, 3.0]])
    with pytest.raises(RankDeficientError):
        fit_ground_plane(s, INTR)
    with pytest.raises(RankDeficientError):
        fit_ground_plane(s[:2], INTR)


def test_least_squares_optimality():
    rng = np.random.default_rng(3)
    coef = np.array([0.02, 0.6, 0.01])
    s = synth_samples(coef, INTR, 300, rng)
    s[:, 2] *= 1 + 0.03 * rng.standard_normal(len(s))
    plane = fit_ground_plane(s, INTR)
    best = plane_residual(plane, s, INTR)
    for _ in range(100):
        p = plane.coefficients * (1 + 0.01 * rng.standard_normal(3))
        assert best <= plane_residual(GroundPlane(*p), s, INTR)


def test_pixel_to_ground_flat_ground_depth():
    f, h = 170.0, 1.5
    plane = GroundPlane(0.0, 1 / h, 0.0)
    for y in (5.5, 20.5, 71.5):
        xy = pixel_to_ground(0.0, y, INTR, plane)
        assert xy[0] == pytest.approx(0.0, abs=1e-12)
        assert xy[1] == pytest.approx(f * h / y, rel=1e-12)


def test_ground_pixel_round_trip():
    rng = np.random.default_rng(5)
    plane = GroundPlane(0.01, 0.55, 0.04)
    xs = rng.uniform(-96, 96, 1000)
    ys = rng.uniform(-72, 72, 1000)
    xy, z, valid = pixels_to_ground(xs, ys, INTR, plane)
    assert valid.sum() > 300
    px, py, pz = ground_to_pixel(xy[valid], INTR, plane)
    assert np.max(np.abs(px - xs[valid])) < 1e-6
    assert np.max(np.abs(py - ys[valid])) < 1e-6
    assert np.allclose(pz, z[valid])


def test_horizon_pixel_raises():
    plane = GroundPlane(0.0, 1 / 1.5, 0.0)
    with pytest.raises(HorizonError):
        pixel_to_ground(3.0, 0.0, INTR, plane)
    with pytest.raises(HorizonError):
        pixel_to_ground(3.0, -10.0, INTR, plane)


def test_ground_frame_matches_layout_camera():
    layout = Layout("t", regions=[(Label.SIDEWALK, rect(-5, 5, 1, 25))], pitch=math.radians(5),
                    depth_noise=0.0)
    scene = render_layout(layout)
    plane = fit_scene_plane(scene)
    # with noiseless depth the camera height is recovered
    assert 1.0 / np.linalg.norm(plane.coefficients) == pytest.approx(layout.camera_height, rel=1e-4)


# ---------- classification ----------

def test_classify_scene():
    labels = np.zeros((10, 10), np.uint8)
    assert classify_scene(labels, 0.05) is SceneKind.PEDESTRIAN_ONLY
    labels[:5] = Label.ROAD
    assert classify_scene(labels, 0.05) is SceneKind.MIXED
    labels[:] = 0
    labels[0, :5] = Label.ROAD                 # exactly 5% road
    assert classify_scene(labels, 0.05) is SceneKind.MIXED


# ---------- BEV ----------

def _component_convex(bev: BevGrid):
    centers = bev.cell_centers()
    for k in np.unique(bev.component_id[bev.component_id >= 0]):
        cells = bev.component_id == k
        pts = centers[cells]
        if len(pts) < 4:
            continue
        tri = Delaunay(pts)
        inside = tri.find_simplex(centers.reshape(-1, 2), tol=1e-9).reshape(bev.shape) >= 0
        yield k, inside, cells


def test_rectangle_is_its_own_hull():
    scene = render_layout(Layout("r", regions=[(Label.SIDEWALK, rect(-2, 2, 2, 15))], depth_noise=0.0))
    bev = build_bev(scene, fit_scene_plane(scene))
    comps = list(_component_convex(bev))
    assert len(comps) == 1
    _, inside, cells = comps[0]
    assert np.array_equal(inside, cells)
    # dilation by 2 cells around the visible rectangle
    assert bev.is_walkable((0.0, 8.0)) and bev.is_walkable((1.9, 8.0))
    assert not bev.is_walkable((3.0, 8.0))


def test_l_shape_concavity_is_filled():
    layout = Layout("l", regions=[(Label.SIDEWALK, rect(-3, 3, 1, 20)), (Label.SIDEWALK, rect(-3, 10, 14, 20))],
                    depth_noise=0.0)
    scene = render_layout(layout)
    bev = build_bev(scene, fit_scene_plane(scene))
    assert bev.is_walkable((4.0, 10.0))       # inside the hull, outside the L
    for _, inside, cells in _component_convex(bev):
        assert np.all(bev.walkable[inside] | bev.obstacle[inside])
    assert np.all(bev.component_id[bev.walkable] >= 0)


def test_pole_splits_sidewalk_and_is_excluded():
    scene = flat_scene(width=96, height=64, focal=80.0)
    labels = scene.labels.copy()
    labels[32:, 44:52] = Label.OBSTACLE            # pole running down to the image bottom
    labels[20:32, 44:52] = Label.OBSTACLE
    scene = flat_scene(width=96, height=64, focal=80.0, labels=labels)
    plane = fit_scene_plane(scene)
    bev = build_bev(scene, plane, dilation_cells=0)
    assert bev.obstacle.any()
    assert not np.any(bev.obstacle & bev.walkable)
    comps = np.unique(bev.component_id[bev.walkable])
    assert len(comps) >= 2
    centers = bev.cell_centers()
    sides = {int(np.sign(np.mean(centers[bev.component_id == k][:, 0]))) for k in comps}
    assert sides == {-1, 1}                       # one blob on each side of the pole
    contact = centers[bev.obstacle].mean(axis=0)
    assert abs(contact[0]) < 0.3                    # footprint sits under the pole


def test_no_walkable_pixels_is_empty_world():
    labels = np.zeros((48, 64), np.uint8)
    scene = flat_scene(labels=labels)
    with pytest.raises(EmptyWorldError):
        build_bev(scene, GroundPlane(0.0, 1 / 1.5, 0.0))


def test_pedestrian_only_treats_road_as_walkable():
    scene = render_layout(Layout("p", regions=[(Label.ROAD, rect(-2, 2, 2, 15))], depth_noise=0.0))
    plane = fit_scene_plane(scene)
    assert classify_scene(scene.labels, 0.05) is SceneKind.MIXED
    with pytest.raises(EmptyWorldError):
        build_bev(scene, plane, kind=SceneKind.MIXED)
    assert build_bev(scene, plane, kind=SceneKind.PEDESTRIAN_ONLY).walkable.any()


@pytest.mark.parametrize("name", ["corridor", "plaza", "crosswalk", "street", "pole_walk"])
def test_bundled_bev_invariants(bundled, name):
    scene = bundled(name)
    bev = build_bev(scene, fit_scene_plane(scene))
    assert not np.any(bev.obstacle & bev.walkable)
    assert np.all(bev.component_id[bev.walkable] >= 0)
    assert np.all(bev.component_id[~bev.walkable] == -1)


# ---------- shadow occluder ----------

def _shadow_scene(az, el):
    light = Lighting(LightingMode.DIRECTIONAL, az, el)
    scene = flat_scene(width=96, height=64, focal=80.0, lighting=light)
    mask = np.zeros(scene.intrinsics.shape, bool)
    mask[40:48, 40:56] = True
    return scene, mask


@pytest.mark.parametrize("az", [0.0, math.pi / 2, 4.0])
def test_occluder_offset_at_45_degrees(az):
    scene, mask = _shadow_scene(az, math.pi / 4)
    plane = GroundPlane(0.0, 1 / 1.5, 0.0)
    occ = build_shadow_occluder(mask, plane, scene.intrinsics, scene.lighting, height=3.0)
    # rays toward the sun climb 3 m while moving 3 m horizontally toward it
    assert np.allclose(occ.offset, [3.0 * math.cos(az), 3.0 * math.sin(az)], atol=1e-12)
    xs, ys = scene.intrinsics.pixel_centers()
    pts, _, _ = pixels_to_ground(xs[mask], ys[mask], scene.intrinsics, plane)
    assert occ.lookup(pts + occ.offset).all()


def test_zenith_occluder_sits_above_shadow():
    scene, mask = _shadow_scene(0.0, math.pi / 2)
    plane = GroundPlane(0.0, 1 / 1.5, 0.0)
    occ = build_shadow_occluder(mask, plane, scene.intrinsics, scene.lighting)
    assert np.allclose(occ.offset, 0.0, atol=1e-12)
    xs, ys = scene.intrinsics.pixel_centers()
    pts, _, _ = pixels_to_ground(xs[mask], ys[mask], scene.intrinsics, plane)
    assert occ.lookup(pts).all()


def test_empty_mask_gives_empty_occluder():
    scene, mask = _shadow_scene(0.0, 0.8)
    occ = build_shadow_occluder(np.zeros_like(mask), GroundPlane(0.0, 1 / 1.5, 0.0), scene.intrinsics,
                                scene.lighting)
    assert not occ.mask.any()


def test_diffuse_light_has_no_occluder():
    scene, mask = _shadow_scene(0.0, 0.8)
    with pytest.raises(OccluderNotApplicableError):
        build_shadow_occluder(mask, GroundPlane(0.0, 1 / 1.5, 0.0), scene.intrinsics, Lighting())


@pytest.mark.parametrize("name", ["corridor", "crosswalk", "street"])
def test_generator_pixels_are_shadowed(bundled, name):
    scene = bundled(name)
    plane = fit_scene_plane(scene)
    occ = build_shadow_occluder(scene.shadow_mask, plane, scene.intrinsics, scene.lighting)
    xs, ys = scene.intrinsics.pixel_centers()
    pts, z, ok = pixels_to_ground(xs[scene.shadow_mask], ys[scene.shadow_mask], scene.intrinsics, plane)
    keep = ok & (z <= 30.0)
    assert keep.sum() > 10
    assert np.all(is_shadowed(pts[keep], 0.0, occ, scene.lighting))


def test_far_point_is_not_shadowed(bundled):
    scene = bundled("corridor")
    plane = fit_scene_plane(scene)
    occ = build_shadow_occluder(scene.shadow_mask, plane, scene.intrinsics, scene.lighting)
    far = occ.origin - 10 * occ.cell_size - occ.offset
    assert not is_shadowed(far, 0.0, occ, scene.lighting)


@settings(max_examples=40, deadline=None)
@given(dx=st.floats(-3.0, 3.0), az=st.floats(0.0, 2 * math.pi - 1e-6))
def test_half_height_point_offset(dx, az):
    H, cs = 3.0, 0.25
    light = Lighting(LightingMode.DIRECTIONAL, az, math.pi / 4)
    mask = np.zeros((41, 41), bool)
    mask[20, 20] = True                        # one occluder cell centered at (0, 0)
    occ = ShadowOccluder(H, cs, np.array([-5.0, -5.0]), mask, np.zeros(2))
    u = np.array([math.cos(az), math.sin(az)])
    point = -(H / 2) * u + dx * np.array([-u[1], u[0]])
    # ray from height H/2 travels H/2 horizontally toward the sun before reaching the plane
    hit = point + (H / 2) * u
    expected = bool(occ.lookup(hit))
    assert is_shadowed(point, H / 2, occ, light) == expected
    if abs(dx) < 0.1:
        assert is_shadowed(point, H / 2, occ, light)
    if abs(dx) > 0.5:
        assert not is_shadowed(point, H / 2, occ, light)
