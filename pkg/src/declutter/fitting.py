"""Placing a generated mesh into the scene's disparity space.

Two stages: a coarse rotation picked from a yaw sweep of the mesh, then a
similarity transform estimated from 2D correspondences between the scene
image and a render of the de-rotated mesh.  When too few reliable
correspondences survive, the visible surfaces are registered with trimmed
scale ICP instead.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Camera, TriangleMesh, backproject, backproject_pixels, sample_disparity, yaw_matrix
from .raster import DisparityGrid, as_image, as_mask, mask_apply, mask_bounds
from .render import RenderSettings, render, render_yaw_sweep, sweep_distance, view_pose
from .sim3 import IcpConfig, RegistrationError, Sim3, run_trimmed_icp, sim3_least_squares
from .voxels import box_iou, volumetric_iou

__all__ = [
    "FitConfig",
    "CorrespondenceSet",
    "FitDiagnostics",
    "Unfittable",
    "FitFailure",
    "fit_object",
    "derotated_pose",
    "baseline_rotation_estimate",
    "BaselineRotation",
    "normalized_silhouette",
    "filter_overlapping",
    "overlap_scan",
]

SCALE_RANGE = (1e-4, 1e4)


class Unfittable(ValueError):
    pass


class FitFailure(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class FitConfig:
    S: int = 8
    K: float = 0.5
    n_min: int = 12
    # a wider capture radius than the registration default: the scene and
    # the render see the object from slightly different directions
    icp: IcpConfig = field(default_factory=lambda: IcpConfig(r_factor=20.0, t_max=100))

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("S must be at least 1")
        if not 0.0 <= self.K <= 1.0:
            raise ValueError("K must lie in [0, 1]")
        if self.n_min < 3:
            raise ValueError("n_min must be at least 3")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "icp" in d and isinstance(d["icp"], dict):
            d["icp"] = IcpConfig(**d["icp"])
        return cls(**d)


@dataclass
class CorrespondenceSet:
    """Pixel pairs ``(source xy, rendered xy)`` with confidences.

    Coordinates are continuous pixel indices: the centre of pixel ``(i, j)``
    sits at ``x = j, y = i``.
    """

    source: np.ndarray
    rendered: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float64).reshape(-1, 2)
        self.rendered = np.asarray(self.rendered, dtype=np.float64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if not len(self.source) == len(self.rendered) == len(self.confidence):
            raise ValueError("correspondence arrays must have equal length")
        if not (np.all(np.isfinite(self.source)) and np.all(np.isfinite(self.rendered))):
            raise ValueError("correspondence coordinates must be finite")
        if not np.all(np.isfinite(self.confidence)):
            raise ValueError("confidences must be finite")

    def __len__(self):
        return len(self.confidence)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))

    def check_bounds(self, source_shape, rendered_shape):
        for xy, (h, w), name in ((self.source, source_shape, "source"), (self.rendered, rendered_shape, "rendered")):
            if len(xy) and (
                np.any(xy[:, 0] < -0.5) or np.any(xy[:, 0] > w - 0.5)
                or np.any(xy[:, 1] < -0.5) or np.any(xy[:, 1] > h - 0.5)
            ):
                raise ValueError(f"{name} coordinates outside the image")

    def to_rows(self):
        return [
            [float(a), float(b), float(c), float(d), float(e)]
            for (a, b), (c, d), e in zip(self.source, self.rendered, self.confidence)
        ]

    @classmethod
    def from_rows(cls, rows):
        arr = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
        return cls(arr[:, 0:2], arr[:, 2:4], arr[:, 4])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_rows(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_rows(json.load(fh))


@dataclass
class FitDiagnostics:
    branch: str = ""
    yaw_views: int = 0
    pairs_total: int = 0
    pairs_kept: int = 0
    residual_rms: float | None = None
    icp_iterations: int = 0
    icp_stop: str = ""
    scale: float | None = None
    message: str = ""

    def to_dict(self):
        return asdict(self)


def normalized_silhouette(mask, size=32):
    """Resample a mask into a ``size``x``size`` frame around its bounding box.

    The frame is the square enclosing the bounding box, so aspect ratio is
    kept while position and scale are factored out.
    """
    mask = as_mask(mask)
    if not mask.any():
        raise ValueError("empty object mask")
    y0, y1, x0, x1 = mask_bounds(mask)
    side = max(y1 - y0, x1 - x0)
    cy, cx = (y0 + y1) / 2.0, (x0 + x1) / 2.0
    t = (np.arange(size) + 0.5) / size - 0.5
    ys = np.floor(cy + t * side).astype(np.int64)
    xs = np.floor(cx + t * side).astype(np.int64)
    inside_y = (ys >= 0) & (ys < mask.shape[0])
    inside_x = (xs >= 0) & (xs < mask.shape[1])
    out = mask[np.clip(ys, 0, mask.shape[0] - 1)][:, np.clip(xs, 0, mask.shape[1] - 1)]
    return out & inside_y[:, None] & inside_x[None, :]


def _silhouette_iou(a, b):
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def baseline_rotation_estimate(masked_image, mask, sweep, size=32):
    """Rotation of the sweep view whose silhouette best matches ``mask``.

    Returns ``(R, index)``.  Ties go to the smallest yaw index.
    """
    if not sweep:
        raise ValueError("empty yaw sweep")
    if len(sweep) == 1:
        return yaw_matrix(sweep[0].yaw), 0
    target = normalized_silhouette(mask, size)
    best, best_iou = 0, -1.0
    for i, view in enumerate(sweep):
        if not view.mask.any():
            continue
        iou = _silhouette_iou(target, normalized_silhouette(view.mask, size))
        if iou > best_iou:
            best, best_iou = i, iou
    return yaw_matrix(sweep[best].yaw), best


class BaselineRotation:
    """Rotation backend using silhouette IoU against the yaw sweep."""

    def __init__(self, size=32):
        self.size = size

    def estimate_rotation(self, masked_image, mask, sweep):
        return baseline_rotation_estimate(masked_image, mask, sweep, self.size)[0]


def derotated_pose(mesh: TriangleMesh, cam: Camera, rotation) -> Sim3:
    """Pose rendering ``mesh`` turned by ``rotation^T`` at sweep framing distance."""
    center, _, dist = sweep_distance(mesh, cam)
    return view_pose(center, rotation, dist)


def _pixel_lookup(mask, xy):
    h, w = mask.shape
    j = np.clip(np.rint(xy[:, 0]).astype(np.int64), 0, w - 1)
    i = np.clip(np.rint(xy[:, 1]).astype(np.int64), 0, h - 1)
    return mask[i, j]


def fit_object(img, mask, d: DisparityGrid, mesh: TriangleMesh, cam: Camera,
               rot_backend, track_backend, cfg: FitConfig | None = None):
    """Similarity transform placing ``mesh`` onto the masked object.

    Returns ``(T, diagnostics)`` with ``T.apply(mesh.vertices)`` in scene
    camera coordinates.
    """
    cfg = cfg or FitConfig()
    img = as_image(img)
    mask = as_mask(mask, d.shape)
    diag = FitDiagnostics(yaw_views=cfg.S)
    usable = mask & d.valid
    if np.count_nonzero(usable) < cfg.n_min:
        raise Unfittable(f"unfittable: {np.count_nonzero(usable)} valid mask pixels, need {cfg.n_min}")
    if len(mesh) == 0:
        raise Unfittable("unfittable: empty mesh")

    settings = RenderSettings(cam)
    sweep = render_yaw_sweep(mesh, cfg.S, settings)
    r_est = np.asarray(rot_backend.estimate_rotation(mask_apply(img, mask), mask, sweep), dtype=np.float64)
    render_pose = derotated_pose(mesh, cam, r_est)
    i_rot, d_rot, m_rot = render(mesh, render_pose, settings)

    corr = track_backend.track(img, i_rot, mask=mask, render_pose=render_pose)
    corr.check_bounds(d.shape, d_rot.shape)
    diag.pairs_total = len(corr)
    keep = corr.confidence >= cfg.K
    if len(corr):
        keep &= _pixel_lookup(mask, corr.source)
        _, ok_a = sample_disparity(d, corr.source)
        _, ok_b = sample_disparity(d_rot, corr.rendered)
        keep &= ok_a & ok_b
    diag.pairs_kept = int(np.count_nonzero(keep))

    t_branch = None
    if diag.pairs_kept >= cfg.n_min:
        x_a, _ = backproject_pixels(d, cam, corr.source[keep])
        x_b, _ = backproject_pixels(d_rot, cam, corr.rendered[keep])
        try:
            t_branch = sim3_least_squares(x_b, x_a)
            resid = t_branch.apply(x_b) - x_a
            diag.residual_rms = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
            diag.branch = "least_squares"
        except RegistrationError as exc:
            diag.message = f"least squares failed: {exc}"
            t_branch = None
    if t_branch is None:
        diag.branch = "icp"
        p_a = backproject(d, cam, select=mask)
        p_b = backproject(d_rot, cam, select=m_rot)
        try:
            res = run_trimmed_icp(p_b, p_a, cfg.icp)
        except RegistrationError as exc:
            diag.message = f"{diag.message}; icp failed: {exc}".lstrip("; ")
            raise FitFailure(f"fit failure: {exc}", diag) from exc
        t_branch = res.transform
        diag.icp_iterations = res.iterations
        diag.icp_stop = res.stop_reason
        diag.residual_rms = res.rms_history[-1] if res.rms_history else None

    total = t_branch.compose(render_pose)
    diag.scale = total.s
    if not SCALE_RANGE[0] <= total.s <= SCALE_RANGE[1]:
        diag.message = f"scale {total.s:.3g} outside {SCALE_RANGE}"
        raise FitFailure(f"fit failure: {diag.message}", diag)
    return total, diag


def overlap_scan(objects, threshold=0.9, measure="volumetric", resolution=64):
    """Sequential duplicate scan over ``(mesh, Sim3)`` pairs in fitting order.

    Returns one record per object: ``{"kept", "iou", "against"}`` where
    ``against`` is the earlier kept object with the largest overlap.
    Discarded objects never suppress later ones.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    posed = [mesh.transformed(pose) for mesh, pose in objects]
    records = []
    kept = []
    for i, m in enumerate(posed):
        best, best_iou = None, 0.0
        for j in kept:
            if measure == "volumetric":
                iou = volumetric_iou(posed[j], m, resolution)
            elif measure == "box":
                iou = box_iou(posed[j], m)
            else:
                raise ValueError(f"unknown overlap measure {measure!r}")
            if iou > best_iou:
                best, best_iou = j, iou
        drop = best is not None and best_iou > threshold
        records.append({"kept": not drop, "iou": float(best_iou), "against": best})
        if not drop:
            kept.append(i)
    return records


def filter_overlapping(objects, threshold=0.9, measure="volumetric", resolution=64):
    """Objects surviving :func:`overlap_scan`, order preserved."""
    objects = list(objects)
    records = overlap_scan(objects, threshold, measure, resolution)
    return [o for o, r in zip(objects, records) if r["kept"]]
