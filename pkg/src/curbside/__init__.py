"""Insert simulated pedestrians and cars into a single street image.

The pipeline estimates the ground plane from a depth map, builds a top-down
walkable grid, moves agents with potential-field crowd and car-following
models, and composites rendered agents (with shadows and occlusion) back
into the photograph.
"""

__version__ = "0.1.0"

from .scene_model import SceneDescription, load_scene, save_scene, validate_scene  # noqa: E402
from .engine import RunConfig, prepare_world, simulate, render_frames  # noqa: E402

__all__ = ["SceneDescription", "load_scene", "save_scene", "validate_scene",
           "RunConfig", "prepare_world", "simulate", "render_frames", "__version__"]
