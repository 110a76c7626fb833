import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from curbside.scene_model import (
    CameraIntrinsics, Crosswalk, GroundPlane, Label, Lane, Lighting, LightingMode,
    SceneParseError, SceneValidationError, TrafficLightSchedule, is_convex, load_scene,
    points_in_convex_polygon, read_ppm, read_raster, save_scene, validate_scene, write_ppm,
    write_raster,
)
from curbside.scenes import BUNDLED, bundled_scene_path

from conftest import flat_scene, write_minimal_scene


def test_minimal_scene_has_no_lanes_and_diffuse_light(tmp_path):
    path = write_minimal_scene(tmp_path)
    doc = json.loads(path.read_text())
    del doc["lanes"], doc["crosswalks"], doc["lighting"]
    path.write_text(json.dumps(doc))
    scene = load_scene(path)
    assert scene.lanes == ()
    assert scene.lighting.mode is LightingMode.DIFFUSE


def test_shadow_on_wall_pixel_is_cleared(tmp_path):
    scene = flat_scene()
    labels = scene.labels.copy()
    labels[30, 10] = Label.WALL
    shadow = np.zeros(scene.intrinsics.shape, bool)
    shadow[30, 10] = shadow[30, 11] = True
    path = tmp_path / "s.scn"
    save_scene(flat_scene(labels=labels), path)
    write_raster(tmp_path / "s.shadow.svr", shadow)
    loaded = load_scene(path)
    assert not loaded.shadow_mask[30, 10]
    assert loaded.shadow_mask[30, 11]


def test_zero_focal_length_names_field(tmp_path):
    path = write_minimal_scene(tmp_path, **{"camera.focal_length_px": 0})
    with pytest.raises(SceneValidationError, match="focal_length_px"):
        load_scene(path)


def test_raster_dimension_mismatch_names_raster(tmp_path):
    path = write_minimal_scene(tmp_path)
    write_raster(tmp_path / "mini.depth.svr", np.ones((10, 20), np.float32))
    with pytest.raises(SceneValidationError, match="depth"):
        load_scene(path)


def test_missing_sidecar_is_io_error(tmp_path):
    path = write_minimal_scene(tmp_path)
    (tmp_path / "mini.labels.svr").unlink()
    with pytest.raises(OSError):
        load_scene(path)


def test_malformed_file_is_parse_error(tmp_path):
    p = tmp_path / "bad.scn"
    p.write_text("{not json")
    with pytest.raises(SceneParseError):
        load_scene(p)
    p.write_text(json.dumps({"format": "other"}))
    with pytest.raises(SceneParseError):
        load_scene(p)


@pytest.mark.parametrize("name", BUNDLED)
def test_round_trip_identity(tmp_path, bundled, name):
    scene = bundled(name)
    save_scene(scene, tmp_path / f"{name}.scn")
    again = load_scene(tmp_path / f"{name}.scn")
    assert again == scene
    assert again.name == scene.name


def test_loading_does_not_mutate_background(tmp_path):
    path = bundled_scene_path("corridor")
    raw = read_ppm(path.with_name("corridor.background.ppm"))
    scene = load_scene(path)
    assert np.array_equal(scene.background, raw / 255.0)
    assert not scene.background.flags.writeable
    with pytest.raises(ValueError):
        scene.background[0, 0, 0] = 0.0


def test_svr1_layout(tmp_path):
    arr = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_raster(tmp_path / "a.svr", arr)
    data = (tmp_path / "a.svr").read_bytes()
    assert data[:4] == b"SVR1"
    assert data[4:14] == (4).to_bytes(4, "little") + (3).to_bytes(4, "little") + bytes([1, 1])
    assert len(data) == 14 + 12 * 4
    assert np.array_equal(read_raster(tmp_path / "a.svr"), arr)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), ch=st.sampled_from([1, 3]), data=st.data())
def test_svr1_round_trip(tmp_path_factory, h, w, ch, data):
    d = tmp_path_factory.mktemp("svr")
    shape = (h, w) if ch == 1 else (h, w, ch)
    seed = data.draw(st.integers(0, 2 ** 16))
    rng = np.random.default_rng(seed)
    u8 = rng.integers(0, 256, shape).astype(np.uint8)
    f32 = rng.standard_normal(shape).astype(np.float32)
    for arr in (u8, f32):
        write_raster(d / "r.svr", arr)
        back = read_raster(d / "r.svr")
        assert back.dtype == arr.dtype and np.array_equal(back, arr)


def test_bad_raster_magic(tmp_path):
    (tmp_path / "x.svr").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(SceneParseError):
        read_raster(tmp_path / "x.svr")


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    write_ppm(tmp_path / "i.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "i.ppm"), img)


def test_intrinsics_invariants():
    with pytest.raises(SceneValidationError):
        CameraIntrinsics(100.0, 8, 32)
    xs, ys = CameraIntrinsics(10.0, 16, 16).pixel_centers()
    assert xs[0, 0] == -7.5 and ys[-1, -1] == 7.5


def test_ground_plane_rejects_zero_and_vertical():
    with pytest.raises(SceneValidationError):
        GroundPlane(0.0, 0.0, 0.0)
    with pytest.raises(SceneValidationError):
        GroundPlane(1.0, 0.0, 0.0)   # normal along camera X: a wall, not ground
    GroundPlane(0.0, 1 / 1.5, 0.0)


def test_lighting_invariants():
    with pytest.raises(SceneValidationError):
        Lighting(LightingMode.DIRECTIONAL, 0.0, 0.0)
    with pytest.raises(SceneValidationError):
        Lighting(LightingMode.DIRECTIONAL, 2 * math.pi, 0.5)
    sun = Lighting(LightingMode.DIRECTIONAL, 0.0, math.pi / 4).sun_vector()
    assert np.allclose(sun, [math.sqrt(0.5), 0.0, math.sqrt(0.5)])


def test_lane_parameterization():
    lane = Lane(((0.0, 0.0), (3.0, 4.0), (3.0, 10.0)), 3.5)
    assert lane.length == pytest.approx(11.0)
    assert np.allclose(lane.point_at(5.0), (3.0, 4.0))
    assert np.allclose(lane.point_at(8.0), (3.0, 7.0))
    assert lane.arc_of((3.2, 7.0)) == pytest.approx(8.0)
    assert np.allclose(lane.direction_at(1.0), (0.6, 0.8))
    with pytest.raises(SceneValidationError):
        Lane(((0.0, 0.0), (0.0, 0.0)), 3.5)
    with pytest.raises(SceneValidationError):
        Lane(((0.0, 0.0), (1.0, 0.0)), 0.0)


def test_crosswalk_invariants():
    with pytest.raises(SceneValidationError):
        Crosswalk(((0, 0), (1, 0), (2, 0)))
    with pytest.raises(SceneValidationError):
        Crosswalk(((0, 0), (2, 0), (1, 0.2), (2, 2), (0, 2)))
    with pytest.raises(SceneValidationError):
        TrafficLightSchedule(0.0, 5.0)


def test_stop_arc_must_precede_crosswalk():
    lane = Lane(((-10.0, 5.0), (10.0, 5.0)), 3.5)
    ok = Crosswalk(((-1, 3), (1, 3), (1, 7), (-1, 7)), {0: 8.0})
    bad = Crosswalk(((-1, 3), (1, 3), (1, 7), (-1, 7)), {0: 9.5})
    validate_scene(flat_scene(lanes=(lane,), crosswalks=(ok,)))
    with pytest.raises(SceneValidationError, match="stop"):
        validate_scene(flat_scene(lanes=(lane,), crosswalks=(bad,)))


def test_point_in_polygon_either_orientation():
    sq = ((0, 0), (1, 0), (1, 1), (0, 1))
    pts = np.array([[0.5, 0.5], [1.5, 0.5], [1.0, 1.0]])
    assert list(points_in_convex_polygon(pts, sq)) == [True, False, True]
    assert list(points_in_convex_polygon(pts, sq[::-1])) == [True, False, True]
    assert is_convex(sq)


def test_scene_is_immutable(bundled):
    scene = bundled("plaza")
    with pytest.raises(ValueError):
        scene.labels[0, 0] = 1
    with pytest.raises(Exception):
        scene.name = "x"
