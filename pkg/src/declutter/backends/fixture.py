"""Backends that replay precomputed outputs from a scene directory.

Directory layout::

    layer_000.png ... layer_N.png    images, one per layer
    mask_000.png  ... mask_{N-1}.png object removed after each layer
    disp_000.pfm  ... disp_N.pfm     disparity per layer
    camera.json                      fx, fy, cx, cy, width, height
    mesh_000.obj  ...                canonical mesh per mask
    proposals.json                   one proposal per layer
    labels.json                      label per mask (optional)
    rotations.json                   3x3 rotation per mask (optional)
    tracks_000.json ...              [x1, y1, x2, y2, conf] rows (optional)

Layers are identified by exact image content, objects by mask overlap.
"""
from __future__ import annotations

import json
import os

import numpy as np

from ..fitting import BaselineRotation, CorrespondenceSet
from ..geometry import Camera
from ..meshio import read_obj
from ..raster import as_image, as_mask, load_disparity, load_image, load_mask
from .base import BackendError, BackendSuite, ObjectProposal, image_key

__all__ = ["FixtureBackends", "fixture_suite", "count_layers"]


def count_layers(root) -> int:
    n = 0
    while os.path.exists(os.path.join(root, f"layer_{n:03d}.png")):
        n += 1
    return n


class FixtureBackends:
    def __init__(self, root):
        self.root = os.fspath(root)
        n = count_layers(self.root)
        if n == 0:
            raise BackendError(f"fixture: no layer_000.png in {self.root}")
        self.images = [load_image(self._p(f"layer_{i:03d}.png")) for i in range(n)]
        self.masks = [load_mask(self._p(f"mask_{i:03d}.png")) for i in range(n - 1)
                      if os.path.exists(self._p(f"mask_{i:03d}.png"))]
        self.camera = Camera.load(self._p("camera.json"))
        self._keys = {image_key(img): i for i, img in enumerate(self.images)}
        self.proposals = [ObjectProposal.from_dict(p) for p in self._json("proposals.json", [])]
        self.labels = self._json("labels.json", None)
        rot = self._json("rotations.json", None)
        self.rotations = None if rot is None else [np.asarray(r, dtype=np.float64) for r in rot]
        self._fallback_rotation = BaselineRotation()

    def _p(self, name):
        return os.path.join(self.root, name)

    def _json(self, name, default):
        path = self._p(name)
        if not os.path.exists(path):
            return default
        with open(path) as fh:
            return json.load(fh)

    def layer_of(self, image) -> int:
        n = self._keys.get(image_key(as_image(image)))
        if n is None:
            raise BackendError("fixture: image does not match any stored layer")
        return n

    def mask_index(self, mask) -> int:
        m = as_mask(mask)
        best, best_iou = None, 0.0
        for i, fm in enumerate(self.masks):
            union = np.count_nonzero(fm | m)
            iou = np.count_nonzero(fm & m) / union if union else 0.0
            if iou > best_iou:
                best, best_iou = i, iou
        if best is None:
            raise BackendError("fixture: mask matches no stored mask")
        return best

    def propose(self, image):
        n = self.layer_of(image)
        return self.proposals[n] if n < len(self.proposals) else ObjectProposal()

    def segment(self, image, label):
        n = self.layer_of(image)
        if n >= len(self.masks):
            return np.zeros(self.camera.shape, dtype=bool)
        if self.labels is not None and self.labels[n] != label:
            return np.zeros(self.camera.shape, dtype=bool)
        return self.masks[n].copy()

    def remove(self, image, mask, label):
        n = self.layer_of(image)
        if n + 1 >= len(self.images):
            raise BackendError(f"fixture: no layer after {n}")
        return self.images[n + 1].copy()

    def estimate_disparity(self, image):
        n = self.layer_of(image)
        return load_disparity(self._p(f"disp_{n:03d}.pfm")), self.camera

    def generate_mesh(self, masked_image):
        i = self.mask_index(np.any(as_image(masked_image) > 0, axis=2))
        return read_obj(self._p(f"mesh_{i:03d}.obj"))

    def estimate_rotation(self, masked_image, mask, sweep):
        if self.rotations is None:
            return self._fallback_rotation.estimate_rotation(masked_image, mask, sweep)
        return self.rotations[self.mask_index(mask)]

    def track(self, image, rendered, *, mask=None, render_pose=None):
        if mask is None:
            raise BackendError("fixture tracker needs the object mask")
        path = self._p(f"tracks_{self.mask_index(mask):03d}.json")
        if not os.path.exists(path):
            return CorrespondenceSet.empty()
        return CorrespondenceSet.load(path)


def fixture_suite(root):
    fx = FixtureBackends(root)
    return BackendSuite(fx, fx, fx, fx, fx, fx, fx, kind="fixture"), fx
