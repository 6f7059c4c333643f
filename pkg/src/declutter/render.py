"""Pinhole z-buffer rasterizer.

Pixels are sampled at their centres.  Inverse depth is affine in screen
space over a planar triangle, so the per-pixel disparity is exact; colours
use perspective-correct barycentrics.  There is no culling, lighting or
anti-aliasing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, TriangleMesh, yaw_matrix
from .raster import DisparityGrid
from .sim3 import Sim3

__all__ = [
    "RenderSettings",
    "Raster",
    "YawView",
    "rasterize",
    "render",
    "render_scene",
    "render_yaw_sweep",
    "sweep_distance",
    "view_pose",
]


@dataclass(frozen=True)
class RenderSettings:
    camera: Camera
    background: tuple = (0.0, 0.0, 0.0)
    near: float = 1e-3

    def __post_init__(self):
        if not self.near > 0:
            raise ValueError("near plane must be positive")


@dataclass
class Raster:
    """Per-pixel winning triangle (-1 for none), barycentrics and 1/z."""

    triangle: np.ndarray
    bary: np.ndarray
    inv_depth: np.ndarray

    @property
    def mask(self):
        return self.triangle >= 0


def rasterize(vertices, triangles, camera: Camera, near=1e-3) -> Raster:
    """Scan-convert camera-space triangles into a z-buffer."""
    h, w = camera.height, camera.width
    tri_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    zbuf = np.zeros((h, w))
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(f) == 0:
        return Raster(tri_id, bary, zbuf)
    z = v[:, 2]
    safe = np.where(z > 0, z, 1.0)
    u = camera.fx * v[:, 0] / safe + camera.cx
    vv = camera.fy * v[:, 1] / safe + camera.cy
    iz = 1.0 / safe

    # any vertex behind the near plane rejects the whole triangle
    front = np.all(z[f] >= near, axis=1)
    for t in np.flatnonzero(front):
        i0, i1, i2 = f[t]
        ua, ub, uc = u[i0], u[i1], u[i2]
        va, vb, vc = vv[i0], vv[i1], vv[i2]
        area = (ub - ua) * (vc - va) - (vb - va) * (uc - ua)
        if area == 0.0:
            continue
        x0 = max(int(np.ceil(min(ua, ub, uc) - 0.5)), 0)
        x1 = min(int(np.floor(max(ua, ub, uc) - 0.5)), w - 1)
        y0 = max(int(np.ceil(min(va, vb, vc) - 0.5)), 0)
        y1 = min(int(np.floor(max(va, vb, vc) - 0.5)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        px = np.arange(x0, x1 + 1) + 0.5
        py = np.arange(y0, y1 + 1)[:, None] + 0.5
        w0 = ((ub - px) * (vc - py) - (vb - py) * (uc - px)) / area
        w1 = ((uc - px) * (va - py) - (vc - py) * (ua - px)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        inv = w0 * iz[i0] + w1 * iz[i1] + w2 * iz[i2]
        sub = zbuf[y0:y1 + 1, x0:x1 + 1]
        win = inside & (inv > sub)
        if not win.any():
            continue
        sub[win] = inv[win]
        tri_id[y0:y1 + 1, x0:x1 + 1][win] = t
        pc = np.stack([w0 * iz[i0], w1 * iz[i1], w2 * iz[i2]], axis=-1) / inv[..., None]
        bary[y0:y1 + 1, x0:x1 + 1][win] = pc[win]
    return Raster(tri_id, bary, zbuf)


def _shade(raster: Raster, triangles, colors, background):
    h, w = raster.triangle.shape
    img = np.empty((h, w, 3))
    img[...] = np.asarray(background, dtype=np.float64)
    hit = raster.mask
    if hit.any() and colors is not None:
        tri = triangles[raster.triangle[hit]]
        c = np.einsum("nk,nkc->nc", raster.bary[hit], colors[tri])
        img[hit] = np.clip(c, 0.0, 1.0)
    elif hit.any():
        img[hit] = 0.5
    return img


def render(mesh: TriangleMesh, pose: Sim3, settings: RenderSettings):
    """Render a posed mesh; returns ``(image, disparity, mask)``."""
    cam_pts = pose.apply(mesh.vertices)
    raster = rasterize(cam_pts, mesh.triangles, settings.camera, settings.near)
    img = _shade(raster, mesh.triangles, mesh.colors, settings.background)
    mask = raster.mask
    return img, DisparityGrid(raster.inv_depth, mask), mask


def render_scene(meshes, poses, settings: RenderSettings):
    """Render several posed meshes together.

    Returns ``(image, disparity, ids)`` where ``ids`` holds the index of the
    visible mesh per pixel, -1 where nothing was hit.
    """
    meshes = list(meshes)
    poses = list(poses)
    verts, tris, cols, owner = [], [], [], []
    offset = 0
    for k, (m, p) in enumerate(zip(meshes, poses)):
        verts.append(p.apply(m.vertices))
        tris.append(m.triangles + offset)
        cols.append(m.colors if m.colors is not None else np.full((len(m.vertices), 3), 0.5))
        owner.append(np.full(len(m.triangles), k))
        offset += len(m.vertices)
    h, w = settings.camera.height, settings.camera.width
    if not meshes:
        img = np.empty((h, w, 3))
        img[...] = np.asarray(settings.background, dtype=np.float64)
        return img, DisparityGrid(np.zeros((h, w))), np.full((h, w), -1)
    v = np.concatenate(verts)
    f = np.concatenate(tris)
    c = np.concatenate(cols)
    own = np.concatenate(owner)
    raster = rasterize(v, f, settings.camera, settings.near)
    img = _shade(raster, f, c, settings.background)
    ids = np.where(raster.mask, own[np.maximum(raster.triangle, 0)], -1)
    return img, DisparityGrid(raster.inv_depth, raster.mask), ids


@dataclass
class YawView:
    image: np.ndarray
    mask: np.ndarray
    yaw: float
    pose: Sim3
    disparity: DisparityGrid


def sweep_distance(mesh: TriangleMesh, camera: Camera, margin=0.1):
    """Centroid, bounding radius and camera distance that frames the mesh."""
    center = mesh.centroid()
    radius = float(np.max(np.linalg.norm(mesh.vertices - center, axis=1))) if len(mesh.vertices) else 0.0
    if not radius > 0:
        raise ValueError("degenerate mesh: zero bounding sphere")
    half = min(
        np.arctan2(camera.cx, camera.fx),
        np.arctan2(camera.width - camera.cx, camera.fx),
        np.arctan2(camera.cy, camera.fy),
        np.arctan2(camera.height - camera.cy, camera.fy),
    )
    return center, radius, (1.0 + margin) * radius / np.sin(half)


def view_pose(center, rotation, distance) -> Sim3:
    """Pose showing the mesh as seen by a camera rotated by ``rotation``.

    The mesh is turned by ``rotation^T`` about ``center`` and placed on the
    optical axis at ``distance``.
    """
    rt = np.asarray(rotation, dtype=np.float64).T
    return Sim3(1.0, rt, np.array([0.0, 0.0, distance]) - rt @ np.asarray(center, dtype=np.float64))


def render_yaw_sweep(mesh: TriangleMesh, count: int, settings: RenderSettings):
    """Render ``count`` views at camera yaw ``2*pi*i/count`` around the centroid."""
    if count < 1:
        raise ValueError("sweep needs at least one view")
    center, _, dist = sweep_distance(mesh, settings.camera)
    views = []
    for i in range(count):
        yaw = 2.0 * np.pi * i / count
        pose = view_pose(center, yaw_matrix(yaw), dist)
        img, disp, mask = render(mesh, pose, settings)
        views.append(YawView(img, mask, yaw, pose, disp))
    return views
