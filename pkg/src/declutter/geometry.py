"""Camera model, meshes, backprojection and spatial search.

Point sets are ``(N, 3)`` float arrays in scene units.  The camera follows
the usual computer-vision convention (x right, y down, z forward) and pixel
``(x, y)`` has its centre at ``(x + 0.5, y + 0.5)`` in continuous image
coordinates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .raster import DisparityGrid, as_image, as_mask

__all__ = [
    "Camera",
    "TriangleMesh",
    "DegenerateBackground",
    "backproject",
    "backproject_pixels",
    "sample_disparity",
    "tessellate_background",
    "nearest_neighbor",
    "voxel_downsample",
    "merge_meshes",
    "box_mesh",
    "sphere_mesh",
    "cylinder_mesh",
    "yaw_matrix",
]


class DegenerateBackground(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self):
        return (self.height, self.width)

    def project(self, points) -> np.ndarray:
        """Pixel-index coordinates ``(x, y)`` of camera-space points."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        x = self.fx * p[:, 0] / p[:, 2] + self.cx - 0.5
        y = self.fy * p[:, 1] / p[:, 2] + self.cy - 0.5
        return np.stack([x, y], axis=1)

    def rays(self, xy) -> np.ndarray:
        """Ray directions with unit z through pixel-index coordinates."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return np.stack(
            [(xy[:, 0] + 0.5 - self.cx) / self.fx, (xy[:, 1] + 0.5 - self.cy) / self.fy, np.ones(len(xy))],
            axis=1,
        )

    def to_dict(self):
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = field(default=None)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate triangle with repeated vertex index")
        c = None
        if self.colors is not None:
            c = np.array(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(v):
                raise ValueError("need one color per vertex")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        object.__setattr__(self, "colors", c)

    def __len__(self):
        return len(self.triangles)

    @property
    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def centroid(self):
        return self.vertices.mean(axis=0)

    def triangle_areas(self):
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def transformed(self, transform) -> "TriangleMesh":
        """Apply anything with an ``apply(points)`` method (e.g. a Sim3)."""
        return TriangleMesh(transform.apply(self.vertices), self.triangles, self.colors)

    def with_color(self, rgb) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles, np.tile(np.asarray(rgb, float), (len(self.vertices), 1)))


def merge_meshes(meshes) -> TriangleMesh:
    meshes = list(meshes)
    if not meshes:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, tris, cols = [], [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        cols.append(m.colors if m.colors is not None else np.full((len(m.vertices), 3), 0.5))
        offset += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris), np.concatenate(cols))


# -- backprojection ------------------------------------------------------------


def backproject(d: DisparityGrid, cam: Camera, select=None, return_pixels=False):
    """Lift valid (and selected) pixels to camera-space points.

    Points come out in row-major pixel order.  With ``return_pixels`` the
    ``(row, col)`` index arrays of the lifted pixels are returned as well.
    """
    if d.shape != cam.shape:
        raise ValueError(f"disparity grid {d.shape} does not match camera {cam.shape}")
    keep = d.valid
    if select is not None:
        keep = keep & as_mask(select, d.shape)
    rows, cols = np.nonzero(keep)
    z = 1.0 / d.values[rows, cols]
    pts = np.stack(
        [(cols + 0.5 - cam.cx) * z / cam.fx, (rows + 0.5 - cam.cy) * z / cam.fy, z], axis=1
    )
    if return_pixels:
        return pts, (rows, cols)
    return pts


def sample_disparity(d: DisparityGrid, xy):
    """Bilinear disparity at pixel-index coordinates.

    Returns ``(values, ok)``; a sample is usable only when every neighbour
    carrying nonzero weight is in bounds and valid.  Integer coordinates
    read the pixel directly.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    h, w = d.shape
    x, y = xy[:, 0], xy[:, 1]
    x0, y0 = np.floor(x), np.floor(y)
    tx, ty = x - x0, y - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    values = np.zeros(len(xy))
    ok = np.isfinite(x) & np.isfinite(y)
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        wgt = (tx if dx else 1 - tx) * (ty if dy else 1 - ty)
        xi, yi = x0 + dx, y0 + dy
        needed = wgt > 0
        inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xi_c, yi_c = np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1)
        good = inb & d.valid[yi_c, xi_c]
        ok &= ~needed | good
        values += np.where(needed & good, wgt * d.values[yi_c, xi_c], 0.0)
    return values, ok


def backproject_pixels(d: DisparityGrid, cam: Camera, xy):
    """Backproject arbitrary pixel-index coordinates; returns ``(points, ok)``."""
    disp, ok = sample_disparity(d, xy)
    z = np.where(ok, 1.0 / np.where(ok, disp, 1.0), np.nan)
    pts = cam.rays(xy) * z[:, None]
    return pts, ok


def tessellate_background(d: DisparityGrid, cam: Camera, img, discontinuity_ratio=None) -> TriangleMesh:
    """Grid-connect neighbouring pixels into a triangle mesh.

    Every valid pixel becomes a vertex.  A pixel whose right, lower and
    lower-right neighbours are valid emits two triangles.  When
    ``discontinuity_ratio`` is set, triangles whose max/min disparity
    exceeds it are dropped.
    """
    image = as_image(img)
    if image.shape[:2] != d.shape:
        raise ValueError("image and disparity dimensions differ")
    pts, (rows, cols) = backproject(d, cam, return_pixels=True)
    h, w = d.shape
    index = np.full((h, w), -1, dtype=np.int64)
    index[rows, cols] = np.arange(len(rows))

    v = d.valid
    quad = v[:-1, :-1] & v[:-1, 1:] & v[1:, :-1] & v[1:, 1:]
    qy, qx = np.nonzero(quad)
    i00 = index[qy, qx]
    i10 = index[qy, qx + 1]
    i01 = index[qy + 1, qx]
    i11 = index[qy + 1, qx + 1]
    tris = np.concatenate(
        [np.stack([i00, i10, i01], axis=1), np.stack([i10, i11, i01], axis=1)]
    )
    # interleave so each pixel's pair stays adjacent
    tris = tris.reshape(2, -1, 3).transpose(1, 0, 2).reshape(-1, 3)
    if discontinuity_ratio is not None and len(tris):
        disp = d.values[rows, cols][tris]
        tris = tris[disp.max(axis=1) / disp.min(axis=1) <= discontinuity_ratio]
    if len(tris) == 0:
        raise DegenerateBackground("degenerate background: no triangle can be emitted")
    return TriangleMesh(pts, tris, image[rows, cols])


# -- spatial search ------------------------------------------------------------


def nearest_neighbor(query, target, radius=None):
    """Exact nearest target point for each query point.

    Returns ``(index, distance)``; queries with no target within ``radius``
    (inclusive) get index -1 and distance ``inf``.
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(t) == 0:
        raise ValueError("nearest_neighbor needs a nonempty target set")
    if len(q) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    tree = cKDTree(t)
    bound = np.inf if radius is None else np.nextafter(float(radius), np.inf)
    dist, idx = tree.query(q, k=1, distance_upper_bound=bound)
    idx = np.where(np.isfinite(dist), idx, -1).astype(np.int64)
    return idx, dist


def voxel_downsample(points, voxel: float) -> np.ndarray:
    """Replace the points of each occupied voxel of edge ``voxel`` by their centroid."""
    if not voxel > 0:
        raise ValueError("voxel size must be positive")
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        return p.copy()
    keys = np.floor(p / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, p)
    return sums / counts[:, None]


# -- primitives ----------------------------------------------------------------


def yaw_matrix(angle: float) -> np.ndarray:
    """Rotation about the camera's vertical (+y) axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def box_mesh(size=(1.0, 1.0, 1.0), color=None) -> TriangleMesh:
    """Axis-aligned box centred at the origin, outward-facing triangles."""
    hx, hy, hz = (0.5 * float(s) for s in size)
    v = np.array(
        [[x, y, z] for x in (-hx, hx) for y in (-hy, hy) for z in (-hz, hz)], dtype=np.float64
    )
    # vertex index = 4*ix + 2*iy + iz
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
        (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
        (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
    ]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    mesh = TriangleMesh(v, np.array(f))
    return mesh.with_color(color) if color is not None else mesh


def sphere_mesh(radius=0.5, n_lat=12, n_lon=24, color=None) -> TriangleMesh:
    verts = [(0.0, -radius, 0.0)]
    for i in range(1, n_lat):
        theta = np.pi * i / n_lat
        y = -radius * np.cos(theta)
        r = radius * np.sin(theta)
        for j in range(n_lon):
            phi = 2 * np.pi * j / n_lon
            verts.append((r * np.cos(phi), y, r * np.sin(phi)))
    verts.append((0.0, radius, 0.0))
    top = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    f = []
    for j in range(n_lon):
        f.append((0, ring(1, j), ring(1, j + 1)))
        f.append((top, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            f += [(a, c, b), (b, c, d)]
    mesh = TriangleMesh(np.array(verts), np.array(f))
    return mesh.with_color(color) if color is not None else mesh


def cylinder_mesh(radius=0.5, height=1.0, segments=64, color=None) -> TriangleMesh:
    """Closed cylinder around the y axis, centred at the origin."""
    h = 0.5 * height
    phi = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(phi), np.zeros(segments), radius * np.sin(phi)], axis=1)
    bottom = ring + [0, -h, 0]
    top = ring + [0, h, 0]
    v = np.concatenate([bottom, top, [[0, -h, 0], [0, h, 0]]])
    cb, ct = 2 * segments, 2 * segments + 1
    f = []
    for j in range(segments):
        k = (j + 1) % segments
        f += [(j, k, segments + j), (k, segments + k, segments + j)]
        f.append((cb, k, j))
        f.append((ct, segments + j, segments + k))
    mesh = TriangleMesh(v, np.array(f))
    return mesh.with_color(color) if color is not None else mesh
