"""Pluggable stand-ins for the proposal, segmentation, removal, depth,
mesh-generation, rotation and tracking roles."""
from .base import (
    BackendError,
    BackendSuite,
    ObjectProposal,
    image_key,
)
from .synthetic import (
    PlacementError,
    SceneObject,
    SyntheticScene,
    default_camera,
    generate_synthetic_scene,
    ghost_scene,
    scene_extent,
)
from .oracle import OracleWorld, canonical_mesh, oracle_suite
from .fixture import FixtureBackends, fixture_suite
from .adapter import AdapterBackends, NoTracks, adapter_suite
from .inpaint import CropInpaintRemover
from .prompts import load_prompts

__all__ = [
    "BackendError",
    "BackendSuite",
    "ObjectProposal",
    "image_key",
    "PlacementError",
    "SceneObject",
    "SyntheticScene",
    "default_camera",
    "generate_synthetic_scene",
    "ghost_scene",
    "scene_extent",
    "OracleWorld",
    "canonical_mesh",
    "oracle_suite",
    "FixtureBackends",
    "fixture_suite",
    "AdapterBackends",
    "NoTracks",
    "adapter_suite",
    "CropInpaintRemover",
    "load_prompts",
]
