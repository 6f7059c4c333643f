"""Ground-truth backends driven by a :class:`SyntheticScene`.

All oracles are stateless: the current layer is identified from the exact
image content, and the object in question from its mask.
"""
from __future__ import annotations

import numpy as np

from ..fitting import CorrespondenceSet
from ..geometry import TriangleMesh, sample_disparity, yaw_matrix
from ..raster import DisparityGrid, as_image, as_mask
from ..render import RenderSettings, render
from ..sim3 import Sim3
from .base import BackendError, BackendSuite, ObjectProposal, image_key
from .synthetic import SyntheticScene

__all__ = ["OracleWorld", "oracle_suite", "canonical_mesh"]


def canonical_mesh(mesh: TriangleMesh, yaw: float):
    """Re-centred, unit-bounding-sphere, yawed copy of ``mesh``.

    Returns ``(canonical, to_local)`` where ``to_local`` maps canonical
    coordinates back to the input mesh frame.
    """
    c = mesh.centroid()
    radius = float(np.max(np.linalg.norm(mesh.vertices - c, axis=1)))
    rot = yaw_matrix(yaw)
    to_canon = Sim3(1.0 / radius, rot, -(rot @ c) / radius)
    return mesh.transformed(to_canon), to_canon.inverse()


class OracleWorld:
    """Shared ground truth behind every oracle role.

    Parameters
    ----------
    scene : SyntheticScene
    corruption : bool
        Apply a per-layer affine distortion ``a * D + b * median(D)`` to
        returned disparities.
    exact_reference : bool
        Leave layer 0 undistorted even when ``corruption`` is on.
    """

    def __init__(self, scene: SyntheticScene, seed=None, corruption=True, exact_reference=True,
                 a_range=(0.8, 1.25), b_range=(-0.1, 0.1)):
        self.scene = scene
        self.seed = scene.seed if seed is None else seed
        self.corruption = corruption
        self.exact_reference = exact_reference
        self.a_range = a_range
        self.b_range = b_range
        self._layers = {image_key(img): n for n, img in enumerate(scene.images)}
        self._canon = []
        for k, obj in enumerate(scene.objects):
            rng = np.random.default_rng([self.seed, 7919, k])
            canon, to_local = canonical_mesh(obj.mesh, rng.uniform(0.0, 2.0 * np.pi))
            self._canon.append((canon, obj.pose.compose(to_local)))
        self.calls = {}

    def _count(self, role):
        self.calls[role] = self.calls.get(role, 0) + 1

    def layer_of(self, image) -> int:
        n = self._layers.get(image_key(as_image(image)))
        if n is None:
            raise BackendError("oracle: image is not a layer of the synthetic scene")
        return n

    def affine(self, layer):
        if not self.corruption or (layer == 0 and self.exact_reference):
            return 1.0, 0.0
        rng = np.random.default_rng([self.seed, 104729, layer])
        return float(rng.uniform(*self.a_range)), float(rng.uniform(*self.b_range))

    def object_from_mask(self, mask) -> int:
        """Object whose silhouette best overlaps ``mask`` (ties: lowest index)."""
        m = as_mask(mask)
        best, best_iou = None, 0.0
        for k, am in enumerate(self.scene.amodal):
            union = np.count_nonzero(am | m)
            iou = np.count_nonzero(am & m) / union if union else 0.0
            if iou > best_iou:
                best, best_iou = k, iou
        if best is None:
            raise BackendError("oracle: mask does not overlap any object")
        return best

    def true_pose(self, k) -> Sim3:
        """Canonical-mesh frame to camera frame for object ``k``."""
        return self._canon[k][1]

    def canonical(self, k) -> TriangleMesh:
        return self._canon[k][0]

    # -- roles -------------------------------------------------------------

    def propose(self, image) -> ObjectProposal:
        self._count("propose")
        return self.scene.proposal(self.layer_of(image))

    def segment(self, image, label):
        self._count("segment")
        n = self.layer_of(image)
        k = self.scene.label_index(label, n)
        if k is None:
            return np.zeros(self.scene.camera.shape, dtype=bool)
        return self.scene.amodal[k].copy()

    def remove(self, image, mask, label):
        self._count("remove")
        n = self.layer_of(image)
        k = self.scene.label_index(label, n)
        if k is None:
            raise BackendError(f"oracle: nothing labelled {label!r} in layer {n}")
        if n < len(self.scene.order) and self.scene.order[n] == k:
            return self.scene.images[n + 1].copy()
        target = sorted(j for j in self.scene.present[n] if j != k)
        for m, present in enumerate(self.scene.present):
            if sorted(present) == target:
                return self.scene.images[m].copy()
        raise BackendError(f"oracle: no ground-truth layer without {label!r}")

    def estimate_disparity(self, image):
        self._count("estimate_disparity")
        n = self.layer_of(image)
        d = self.scene.disparities[n]
        a, b = self.affine(n)
        if a == 1.0 and b == 0.0:
            return d, self.scene.camera
        med = float(np.median(d.values[d.valid]))
        vals = np.where(d.valid, a * d.values + b * med, 0.0)
        return DisparityGrid(vals, d.valid & (vals > 0)), self.scene.camera

    def generate_mesh(self, masked_image):
        self._count("generate_mesh")
        img = as_image(masked_image)
        return self.canonical(self.object_from_mask(np.any(img > 0, axis=2)))

    def estimate_rotation(self, masked_image, mask, sweep):
        self._count("estimate_rotation")
        # render pose rotation is R^T, so the true pose rotation is returned transposed
        return self.true_pose(self.object_from_mask(mask)).R.T

    def track(self, image, rendered, *, mask=None, render_pose=None):
        """Projective ground-truth pairs from rendered pixel centres.

        A pair is emitted when the surface point behind a rendered pixel is
        visible in the scene image and the scene's bilinear disparity there
        reproduces its depth (to 1e-9 relative), so backprojection is exact.
        """
        self._count("track")
        if mask is None or render_pose is None:
            raise BackendError("oracle tracker needs the object mask and render pose")
        n = self.layer_of(image)
        k = self.object_from_mask(mask)
        cam = self.scene.camera
        _, d_rot, m_rot = render(self.canonical(k), render_pose, RenderSettings(cam))
        rows, cols = np.nonzero(m_rot)
        if rows.size == 0:
            return CorrespondenceSet.empty()
        xy_rot = np.stack([cols, rows], axis=1).astype(np.float64)
        z = 1.0 / d_rot.values[rows, cols]
        p_rot = cam.rays(xy_rot) * z[:, None]
        scene_pts = self.true_pose(k).compose(render_pose.inverse()).apply(p_rot)
        xy_src = cam.project(scene_pts)
        h, w = cam.shape
        inside = (xy_src[:, 0] >= 0) & (xy_src[:, 0] <= w - 1) & (xy_src[:, 1] >= 0) & (xy_src[:, 1] <= h - 1)
        disp, ok = sample_disparity(self.scene.disparities[n], np.where(inside[:, None], xy_src, 0.0))
        truth = 1.0 / scene_pts[:, 2]
        exact = inside & ok & (np.abs(disp - truth) <= 1e-9 * truth)
        return CorrespondenceSet(xy_src[exact], xy_rot[exact], np.ones(int(exact.sum())))


def oracle_suite(scene: SyntheticScene, **kwargs):
    """All seven roles backed by one :class:`OracleWorld`."""
    world = OracleWorld(scene, **kwargs)
    suite = BackendSuite(world, world, world, world, world, world, world, kind="oracle")
    return suite, world
