"""Parity-fill voxelization and overlap measures between meshes."""
from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh

__all__ = ["voxelize", "volumetric_iou", "box_iou"]

# Off-centre offset for the z rays, as a fraction of a voxel; keeps rays off
# shared triangle edges (e.g. the diagonal of a split quad).
_RAY_JITTER = (1.234567e-7, 2.718281e-7)


def voxelize(mesh: TriangleMesh, lo, hi, resolution: int) -> np.ndarray:
    """Occupancy of voxel centres inside a closed mesh.

    The box ``[lo, hi]`` is split into ``resolution`` cells per axis.  For
    each ``(x, y)`` column a ray is cast along z and a centre is inside when
    an odd number of surface crossings lie below it.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    n = int(resolution)
    step = (hi - lo) / n
    toggles = np.zeros((n, n, n + 1), dtype=np.int64)
    if np.any(step <= 0) or len(mesh) == 0:
        return np.zeros((n, n, n), dtype=bool)

    cx = lo[0] + (np.arange(n) + 0.5 + _RAY_JITTER[0]) * step[0]
    cy = lo[1] + (np.arange(n) + 0.5 + _RAY_JITTER[1]) * step[1]
    tri = mesh.vertices[mesh.triangles]
    for a, b, c in tri:
        # signed area of the xy projection
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if area == 0.0:
            continue
        xmin, xmax = min(a[0], b[0], c[0]), max(a[0], b[0], c[0])
        ymin, ymax = min(a[1], b[1], c[1]), max(a[1], b[1], c[1])
        i0, i1 = np.searchsorted(cx, xmin), np.searchsorted(cx, xmax, side="right")
        j0, j1 = np.searchsorted(cy, ymin), np.searchsorted(cy, ymax, side="right")
        if i0 >= i1 or j0 >= j1:
            continue
        px, py = np.meshgrid(cx[i0:i1], cy[j0:j1], indexing="ij")
        w0 = (b[0] - px) * (c[1] - py) - (b[1] - py) * (c[0] - px)
        w1 = (c[0] - px) * (a[1] - py) - (c[1] - py) * (a[0] - px)
        w2 = area - w0 - w1
        w0, w1, w2 = w0 / area, w1 / area, w2 / area
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z = w0[inside] * a[2] + w1[inside] * b[2] + w2[inside] * c[2]
        k = np.floor((z - lo[2]) / step[2] - 0.5).astype(np.int64) + 1
        k = np.clip(k, 0, n)
        ii, jj = np.nonzero(inside)
        np.add.at(toggles, (ii + i0, jj + j0, k), 1)
    return (np.cumsum(toggles, axis=2)[..., :n] % 2).astype(bool)


def _bounds_disjoint(a: TriangleMesh, b: TriangleMesh) -> bool:
    (alo, ahi), (blo, bhi) = a.bounds, b.bounds
    return bool(np.any(ahi < blo) or np.any(bhi < alo))


def volumetric_iou(a: TriangleMesh, b: TriangleMesh, resolution: int = 64) -> float:
    """Voxel IoU of two closed meshes over their joint bounding box."""
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    if len(a) == 0 or len(b) == 0 or _bounds_disjoint(a, b):
        return 0.0
    lo = np.minimum(a.bounds[0], b.bounds[0])
    hi = np.maximum(a.bounds[1], b.bounds[1])
    va = voxelize(a, lo, hi, resolution)
    vb = voxelize(b, lo, hi, resolution)
    union = np.count_nonzero(va | vb)
    if union == 0:
        raise ValueError("empty union")
    return np.count_nonzero(va & vb) / union


def box_iou(a: TriangleMesh, b: TriangleMesh) -> float:
    """IoU of the axis-aligned bounding boxes."""
    (alo, ahi), (blo, bhi) = a.bounds, b.bounds
    inter = np.prod(np.clip(np.minimum(ahi, bhi) - np.maximum(alo, blo), 0.0, None))
    union = np.prod(ahi - alo) + np.prod(bhi - blo) - inter
    if union <= 0:
        raise ValueError("empty union")
    return float(inter / union)
