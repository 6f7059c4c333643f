"""Backend roles and the suite that bundles them.

Each role is a duck-typed interface; the pipeline only calls the methods
listed in the protocols below.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

__all__ = [
    "BackendError",
    "ObjectProposal",
    "BackendSuite",
    "Proposer",
    "Segmenter",
    "Remover",
    "DepthEstimator",
    "MeshGenerator",
    "RotationEstimator",
    "Tracker",
    "image_key",
]


class BackendError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectProposal:
    visible_object: str = ""
    secondary_objects: tuple = ()
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "secondary_objects", tuple(self.secondary_objects))
        if not self.visible_object and self.secondary_objects:
            raise ValueError("an empty proposal cannot list secondary objects")

    @property
    def empty(self):
        return not self.visible_object

    def to_dict(self):
        return {
            "visible_object": self.visible_object,
            "secondary_objects": list(self.secondary_objects),
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("visible_object", ""), tuple(d.get("secondary_objects", ())), d.get("description", ""))


class Proposer(Protocol):
    def propose(self, image) -> ObjectProposal: ...


class Segmenter(Protocol):
    def segment(self, image, label: str) -> np.ndarray: ...


class Remover(Protocol):
    def remove(self, image, mask, label: str) -> np.ndarray: ...


class DepthEstimator(Protocol):
    def estimate_disparity(self, image): ...


class MeshGenerator(Protocol):
    def generate_mesh(self, masked_image): ...


class RotationEstimator(Protocol):
    def estimate_rotation(self, masked_image, mask, sweep) -> np.ndarray: ...


class Tracker(Protocol):
    def track(self, image, rendered, *, mask=None, render_pose=None): ...


ROLES = ("proposer", "segmenter", "remover", "depth_estimator", "mesh_generator", "rotation_estimator", "tracker")


@dataclass
class BackendSuite:
    proposer: Proposer
    segmenter: Segmenter
    remover: Remover
    depth_estimator: DepthEstimator
    mesh_generator: MeshGenerator
    rotation_estimator: RotationEstimator
    tracker: Tracker
    kind: str = field(default="custom")

    def __post_init__(self):
        missing = [r for r in ROLES if getattr(self, r) is None]
        if missing:
            raise ValueError(f"backend suite is missing {', '.join(missing)}")


def image_key(image) -> bytes:
    """Exact content key of an image array (shape and float64 bytes)."""
    arr = np.ascontiguousarray(np.asarray(image, dtype=np.float64))
    h = hashlib.sha1(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.digest()
