import json

import numpy as np
import pytest

from curbside.geometry import BevGrid
from curbside.scene_model import CameraIntrinsics, Label, Lighting, SceneDescription, save_scene
from curbside.scenes import load_bundled


@pytest.fixture(scope="session")
def bundled():
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = load_bundled(name)
        return cache[name]
    return get


def flat_scene(width=64, height=48, focal=60.0, cam_height=1.5, labels=None, lighting=Lighting(),
               **kw) -> SceneDescription:
    """Level camera over flat ground; lower half labeled sidewalk unless ``labels`` is given."""
    intr = CameraIntrinsics(focal, width, height)
    xs, ys = intr.pixel_centers()
    with np.errstate(divide="ignore"):
        depth = np.where(ys > 0, focal * cam_height / np.where(ys > 0, ys, 1.0), np.inf)
    if labels is None:
        labels = np.where(ys > 0, int(Label.SIDEWALK), int(Label.OTHER)).astype(np.uint8)
    shadow = kw.pop("shadow_mask", np.zeros(intr.shape, bool))
    bg = kw.pop("background", np.full(intr.shape + (3,), 0.5))
    return SceneDescription(intr, np.asarray(labels, np.uint8), depth.astype(np.float32), lighting,
                            shadow, bg, **kw)


def corridor_grid(length_m=24.0, width_m=3.0, cell=0.25):
    ny = int(round(length_m / cell)) + 1
    nx = int(round(width_m / cell)) + 1
    walk = np.ones((ny, nx), bool)
    edge = np.zeros_like(walk)
    edge[0, :] = edge[-1, :] = True         # both ends leave the picture
    return BevGrid.from_masks(walk, cell_size=cell, origin=(-width_m / 2, 0.0), edge=edge)


def write_minimal_scene(tmp_path, **overrides):
    scene = flat_scene()
    path = tmp_path / "mini.scn"
    save_scene(scene, path)
    if overrides:
        doc = json.loads(path.read_text())
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            if name:
                doc[section][name] = value
            else:
                doc[section] = value
        path.write_text(json.dumps(doc))
    return path


def pytest_terminal_summary(terminalreporter):
    """Repeat the PASS/FAIL line of every acceptance test at the end of the run."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance" in getattr(rep, "nodeid", "") and rep.when == "call":
                lines += [l for l in rep.capstdout.splitlines() if l.startswith(("PASS", "FAIL"))]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
