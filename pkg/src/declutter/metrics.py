"""Reconstruction scores: point-set distances, F-score, depth and
segmentation agreement.

F-scores are percentages; IoU and Rand index are fractions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .geometry import Camera, TriangleMesh
from .raster import as_mask
from .render import RenderSettings, render_scene
from .sim3 import Sim3

__all__ = [
    "sample_surface",
    "chamfer",
    "fscore",
    "object_fscore",
    "depth_error",
    "segmentation_scores",
    "instance_masks",
    "mesh_iou",
    "rand_index",
    "layout_ids",
    "evaluate_layouts",
    "MetricReport",
    "NoOverlap",
]


class NoOverlap(ValueError):
    pass


def sample_surface(mesh: TriangleMesh, count: int, seed=0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if count < 0:
        raise ValueError("count must be >= 0")
    if count == 0:
        return np.zeros((0, 3))
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=count, p=areas / total)
    u, v = rng.random(count), rng.random(count)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def _nn_dist(query, target):
    if len(target) == 0:
        return np.full(len(query), np.inf)
    return cKDTree(target).query(query, k=1)[0]


def _points(p):
    return np.asarray(p, dtype=np.float64).reshape(-1, 3)


def chamfer(a, b, clip=None) -> float:
    """Sum of the two directed mean nearest-neighbour distances.

    With ``clip`` each per-point distance is capped at that value first.
    """
    a, b = _points(a), _points(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs two nonempty point sets")
    da, db = _nn_dist(a, b), _nn_dist(b, a)
    if clip is not None:
        da, db = np.minimum(da, clip), np.minimum(db, clip)
    return float(da.mean() + db.mean())


def fscore(pred, gt, tau=0.1):
    """``(precision, recall, f1)`` in percent at distance threshold ``tau``."""
    pred, gt = _points(pred), _points(gt)
    precision = 100.0 * float(np.mean(_nn_dist(pred, gt) <= tau)) if len(pred) else 0.0
    recall = 100.0 * float(np.mean(_nn_dist(gt, pred) <= tau)) if len(gt) else 0.0
    f1 = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
    return precision, recall, f1


def object_fscore(pred_objects, gt_objects, tau=0.1, return_matching=False):
    """Mean F1 over ground-truth objects under the best one-to-one matching."""
    pred_objects, gt_objects = list(pred_objects), list(gt_objects)
    if not gt_objects:
        raise ValueError("need at least one ground-truth object")
    score = np.zeros((len(gt_objects), len(pred_objects)))
    for i, g in enumerate(gt_objects):
        for j, p in enumerate(pred_objects):
            score[i, j] = fscore(p, g, tau)[2]
    per_gt = np.zeros(len(gt_objects))
    match = {}
    if pred_objects:
        rows, cols = linear_sum_assignment(score, maximize=True)
        per_gt[rows] = score[rows, cols]
        match = {int(r): int(c) for r, c in zip(rows, cols)}
    mean = float(per_gt.mean())
    if return_matching:
        return mean, per_gt, match
    return mean


def _layout_meshes(layout, with_background=False):
    meshes = [obj.posed() for obj in layout.objects]
    if with_background and layout.background is not None:
        meshes.append(layout.background)
    return meshes


def _depth_render(meshes, cam):
    _, disp, _ = render_scene(meshes, [Sim3()] * len(meshes), RenderSettings(cam))
    return disp


def depth_error(pred_layout, gt_layout, cam: Camera, with_background=False) -> float:
    """Mean absolute depth difference over pixels both layouts cover."""
    dp = _depth_render(_layout_meshes(pred_layout, with_background), cam)
    dg = _depth_render(_layout_meshes(gt_layout, with_background), cam)
    both = dp.valid & dg.valid
    if not both.any():
        raise NoOverlap("no overlap between the two depth renderings")
    return float(np.mean(np.abs(dp.depth()[both] - dg.depth()[both])))


def instance_masks(ids):
    """Split an integer id map (negative = unlabeled) into ``{id: mask}``."""
    ids = np.asarray(ids)
    return {int(k): ids == k for k in np.unique(ids) if k >= 0}


def _label_map(masks, shape):
    """Instance masks to a label map; later masks win overlaps, 0 = unlabeled."""
    lab = np.zeros(shape, dtype=np.int64)
    for i, m in enumerate(masks, start=1):
        lab[as_mask(m, shape)] = i
    return lab


def rand_index(labels_a, labels_b) -> float:
    """Exact Rand index of two pixel partitions via their contingency table."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    n = a.size
    if n != b.size:
        raise ValueError("partitions cover different pixel counts")
    if n < 2:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        x = x.astype(np.float64)
        return float(np.sum(x * (x - 1) / 2.0))

    total = n * (n - 1) / 2.0
    same_both = pairs(table)
    same_a = pairs(table.sum(axis=1))
    same_b = pairs(table.sum(axis=0))
    agree = total + 2.0 * same_both - same_a - same_b
    return float(agree / total)


def segmentation_scores(pred_masks, gt_masks, shape=None):
    """``(mean matched IoU, Rand index)`` of two instance mask sets.

    Each ground-truth instance takes the unused prediction with the largest
    IoU, in ground-truth order; unmatched instances score 0.
    """
    pred_masks = [as_mask(m) for m in (pred_masks.values() if isinstance(pred_masks, dict) else pred_masks)]
    gt_masks = [as_mask(m) for m in (gt_masks.values() if isinstance(gt_masks, dict) else gt_masks)]
    if shape is None:
        ref = (gt_masks or pred_masks)
        if not ref:
            raise ValueError("need at least one mask or an explicit shape")
        shape = ref[0].shape
    ious = []
    used = set()
    for g in gt_masks:
        best, best_iou = None, 0.0
        for j, p in enumerate(pred_masks):
            if j in used:
                continue
            union = np.count_nonzero(g | p)
            iou = np.count_nonzero(g & p) / union if union else 0.0
            if iou > best_iou:
                best, best_iou = j, iou
        if best is not None:
            used.add(best)
        ious.append(best_iou)
    mean_iou = float(np.mean(ious)) if ious else 0.0
    ri = rand_index(_label_map(pred_masks, shape), _label_map(gt_masks, shape))
    return mean_iou, ri


def layout_ids(layout, cam: Camera):
    """Visible object index per pixel of a layout's objects, -1 elsewhere."""
    meshes = _layout_meshes(layout)
    _, _, ids = render_scene(meshes, [Sim3()] * len(meshes), RenderSettings(cam))
    return ids


def mesh_iou(layout, gt_masks, cam: Camera) -> float:
    """Mean matched IoU of the layout's rendered instances against ``gt_masks``."""
    gt = list(gt_masks.values()) if isinstance(gt_masks, dict) else list(gt_masks)
    if not layout.objects:
        return 0.0
    pred = list(instance_masks(layout_ids(layout, cam)).values())
    return segmentation_scores(pred, gt, cam.shape)[0]


@dataclass
class MetricReport:
    chamfer: float
    precision: float
    recall: float
    f1: float
    obj_fs: float
    depth_error: float | None
    seg_iou: float
    rand_index: float
    mesh_iou: float
    tau: float
    samples_per_object: int
    chamfer_clipped: float | None = None

    def to_dict(self):
        return asdict(self)


def evaluate_layouts(pred, gt, cam: Camera, tau=0.1, samples=10000, seed=0, with_background=False,
                     pred_masks=None) -> MetricReport:
    """Every score comparing a reconstructed layout against ground truth.

    Segmentation scores use ``pred_masks`` (e.g. the decomposition's
    amodal masks) when given, otherwise the layout's rendered instances.
    Ground-truth instances are the visible regions of the ground-truth
    objects.
    """
    # both sides draw from the same seed stream, so identical layouts give identical samples
    pred_pts = [sample_surface(o.posed(), samples, seed=[seed, i]) for i, o in enumerate(pred.objects)]
    gt_pts = [sample_surface(o.posed(), samples, seed=[seed, i]) for i, o in enumerate(gt.objects)]
    if with_background:
        if pred.background is not None:
            pred_pts.append(sample_surface(pred.background, samples, seed=[seed, -1 % 2**32]))
        if gt.background is not None:
            gt_pts.append(sample_surface(gt.background, samples, seed=[seed, -1 % 2**32]))
    all_pred = np.concatenate(pred_pts) if pred_pts else np.zeros((0, 3))
    all_gt = np.concatenate(gt_pts) if gt_pts else np.zeros((0, 3))
    if len(all_pred) and len(all_gt):
        cd = chamfer(all_pred, all_gt)
        cd_clip = chamfer(all_pred, all_gt, clip=tau)
    else:
        cd, cd_clip = float("inf"), float("inf")
    p, r, f = fscore(all_pred, all_gt, tau)
    ofs = object_fscore(pred_pts, gt_pts, tau) if gt_pts else 0.0
    try:
        de = depth_error(pred, gt, cam, with_background)
    except NoOverlap:
        de = None
    gt_inst = list(instance_masks(layout_ids(gt, cam)).values())
    pred_inst = list(instance_masks(layout_ids(pred, cam)).values())
    if pred_masks is not None:
        pred_inst = [as_mask(m, cam.shape) for m in pred_masks]
    seg, ri = segmentation_scores(pred_inst, gt_inst, cam.shape)
    return MetricReport(cd, p, r, f, ofs, de, seg, ri, mesh_iou(pred, gt_inst, cam), tau, samples, cd_clip)
