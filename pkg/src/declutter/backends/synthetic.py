"""Seeded tabletop-style scenes with exact ground truth.

Boxes and spheres rest on a ground plane in front of a back wall.  The
scene knows every object's mesh and pose, renders each removal layer, and
decides removal order the same way the oracle proposer does: the nearest
object that nothing else covers goes first, and anything resting on it is
listed as a secondary object to clear beforehand.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import Camera, TriangleMesh, box_mesh, merge_meshes, sphere_mesh, yaw_matrix
from ..render import RenderSettings, render, render_scene
from ..sim3 import Sim3
from .base import ObjectProposal

__all__ = [
    "SceneObject",
    "SyntheticScene",
    "PlacementError",
    "default_camera",
    "generate_synthetic_scene",
    "ghost_scene",
    "propose_next",
    "scene_extent",
]

GROUND_Y = 1.0
WALL_Z = 8.0


class PlacementError(RuntimeError):
    def __init__(self, message, retries):
        super().__init__(message)
        self.retries = retries


def default_camera() -> Camera:
    return Camera(140.0, 140.0, 80.0, 60.0, 160, 120)


@dataclass
class SceneObject:
    label: str
    shape: str
    mesh: TriangleMesh  # object frame
    pose: Sim3  # object frame -> camera
    support: int | None = None
    footprint: float = 0.0

    def posed(self) -> TriangleMesh:
        return self.mesh.transformed(self.pose)


@dataclass
class SyntheticScene:
    camera: Camera
    background: TriangleMesh
    objects: list
    present: list  # per layer, indices of the objects still in the scene
    order: list  # object removed between layer n and n + 1
    images: list
    disparities: list
    amodal: list  # per object, full silhouette rendered alone
    seed: int = 0
    info: dict = field(default_factory=dict)

    @property
    def num_layers(self):
        return len(self.images)

    def label_index(self, label, layer):
        for k in self.present[layer]:
            if self.objects[k].label == label:
                return k
        return None

    def proposal(self, layer) -> ObjectProposal:
        return propose_next(self, self.present[layer])

    def visible_ids(self, layer):
        """Per-pixel index of the visible object in a layer, -1 elsewhere."""
        return _visible_ids(self.objects, self.present[layer], self.background, self.camera)


def _visible_ids(objects, present, background, camera):
    meshes = [objects[k].mesh for k in present] + [background]
    poses = [objects[k].pose for k in present] + [Sim3()]
    _, _, ids = render_scene(meshes, poses, RenderSettings(camera))
    lut = np.array(list(present) + [-1, -1])
    return lut[np.where(ids < 0, len(present) + 1, ids)]


def _object_ids(objects, present, camera):
    meshes = [objects[k].mesh for k in present]
    poses = [objects[k].pose for k in present]
    _, _, ids = render_scene(meshes, poses, RenderSettings(camera))
    lut = np.array(list(present) + [-1])
    return lut[np.where(ids < 0, len(present), ids)]


def propose_next(scene: SyntheticScene, present) -> ObjectProposal:
    """The removal rule shared by the generator and the oracle proposer."""
    present = list(present)
    if not present:
        return ObjectProposal()
    objs = scene.objects
    items = {k: [j for j in present if objs[j].support == k] for k in present}
    free = [k for k in present if objs[k].support not in present]
    ids = _object_ids(objs, present, scene.camera)
    eligible = []
    for k in free:
        allowed = np.isin(ids[scene.amodal[k]], [k] + items[k])
        if allowed.all():
            eligible.append(k)
    pool = eligible or free
    dist = [float(np.linalg.norm(objs[k].pose.t)) for k in pool]
    pick = pool[int(np.argmin(dist))]
    secondary = sorted(items[pick], key=lambda j: float(np.linalg.norm(objs[j].pose.t)))
    return ObjectProposal(
        objs[pick].label,
        tuple(objs[j].label for j in secondary),
        f"{objs[pick].shape} nearest to the camera",
    )


def _background_mesh(rng) -> TriangleMesh:
    # ground (y = GROUND_Y) and back wall (z = WALL_Z), each an n x n grid
    n = 8
    u = np.linspace(0.0, 1.0, n + 1)
    gx, gz = np.meshgrid(-8.0 + 16.0 * u, 0.5 + (WALL_Z - 0.5) * u, indexing="ij")
    ground = np.stack([gx.ravel(), np.full(gx.size, GROUND_Y), gz.ravel()], axis=1)
    wx, wy = np.meshgrid(-8.0 + 16.0 * u, -6.0 + (GROUND_Y + 6.0) * u, indexing="ij")
    wall = np.stack([wx.ravel(), wy.ravel(), np.full(wx.size, WALL_Z)], axis=1)

    def grid_tris(offset):
        f = []
        for i in range(n):
            for j in range(n):
                a = offset + i * (n + 1) + j
                b, c, d = a + n + 1, a + 1, a + n + 2
                f += [(a, b, c), (c, b, d)]
        return f

    verts = np.concatenate([ground, wall])
    tris = np.array(grid_tris(0) + grid_tris(len(ground)))
    base = np.concatenate([np.tile([0.55, 0.5, 0.42], (len(ground), 1)), np.tile([0.7, 0.72, 0.75], (len(wall), 1))])
    colors = np.clip(base + rng.uniform(-0.12, 0.12, size=base.shape), 0.0, 1.0)
    return TriangleMesh(verts, tris, colors)


def _object_colors(rng, count):
    base = rng.uniform(0.25, 0.95, size=3)
    return np.clip(base + rng.uniform(-0.15, 0.15, size=(count, 3)), 0.05, 1.0)


def _make_shape(shape, rng):
    if shape == "box":
        size = (rng.uniform(0.45, 0.9), rng.uniform(0.35, 0.9), rng.uniform(0.45, 0.9))
        mesh = box_mesh(size)
        half_h, foot = size[1] / 2.0, 0.5 * np.hypot(size[0], size[2])
    elif shape == "sphere":
        r = rng.uniform(0.25, 0.45)
        mesh = sphere_mesh(r, 12, 24)
        half_h, foot = r, r
    elif shape == "table":
        size = (rng.uniform(1.1, 1.4), rng.uniform(0.45, 0.6), rng.uniform(0.7, 0.85))
        mesh = box_mesh(size)
        half_h, foot = size[1] / 2.0, 0.5 * np.hypot(size[0], size[2])
    else:
        raise ValueError(f"unknown shape {shape!r}")
    mesh = TriangleMesh(mesh.vertices, mesh.triangles, _object_colors(rng, len(mesh.vertices)))
    return mesh, half_h, foot


def _in_frame(mesh: TriangleMesh, pose: Sim3, camera: Camera, margin=2.0):
    p = pose.apply(mesh.vertices)
    if np.any(p[:, 2] < 0.5):
        return False
    xy = camera.project(p)
    return bool(
        np.all(xy[:, 0] >= margin - 0.5) and np.all(xy[:, 0] <= camera.width - 0.5 - margin)
        and np.all(xy[:, 1] >= margin - 0.5) and np.all(xy[:, 1] <= camera.height - 0.5 - margin)
    )


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _render_layers(camera, background, objects, present_sets):
    settings = RenderSettings(camera)
    images, disps = [], []
    for present in present_sets:
        meshes = [objects[k].mesh for k in present] + [background]
        poses = [objects[k].pose for k in present] + [Sim3()]
        img, disp, _ = render_scene(meshes, poses, settings)
        images.append(_quantize(img))
        disps.append(disp)
    amodal = [render(o.mesh, o.pose, settings)[2] for o in objects]
    return images, disps, amodal


def _removal_sequence(scene):
    present = list(range(len(scene.objects)))
    sets, order = [list(present)], []
    while present:
        prop = propose_next(scene, present)
        queue = list(prop.secondary_objects) or [prop.visible_object]
        for label in queue:
            k = next(j for j in present if scene.objects[j].label == label)
            present = [j for j in present if j != k]
            sets.append(list(present))
            order.append(k)
    return sets, order


def generate_synthetic_scene(count: int, shapes=("box", "sphere"), seed: int = 0,
                             support: bool = False, camera: Camera | None = None,
                             max_retries: int = 200) -> SyntheticScene:
    """Random non-interpenetrating objects on the ground, fully in frame.

    With ``support`` the first two objects are a table and an item resting
    on it (``count`` must then be at least 2).
    """
    if count < 0:
        raise ValueError("object count must be >= 0")
    shapes = tuple(shapes)
    if count and not shapes:
        raise ValueError("need at least one shape")
    if support and count < 2:
        raise ValueError("a support relation needs at least two objects")
    camera = camera or default_camera()
    rng = np.random.default_rng(seed)
    background = _background_mesh(rng)
    objects: list[SceneObject] = []
    attempts = 0

    for k in range(count):
        on_table = support and k == 1
        shape = "table" if support and k == 0 else str(rng.choice(shapes))
        mesh, half_h, foot = _make_shape(shape, rng)
        placed = False
        for _ in range(max_retries):
            attempts += 1
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            if on_table:
                table = objects[0]
                top = table.pose.t[1] - (table.mesh.bounds[1][1] - table.mesh.bounds[0][1]) / 2.0
                hx = (table.mesh.bounds[1][0] - table.mesh.bounds[0][0]) / 2.0 - foot
                hz = (table.mesh.bounds[1][2] - table.mesh.bounds[0][2]) / 2.0 - foot
                if hx <= 0 or hz <= 0:
                    mesh, half_h, foot = _make_shape(shape, rng)
                    continue
                local = np.array([rng.uniform(-hx, hx) * 0.5, 0.0, rng.uniform(-hz, hz) * 0.5])
                pos = table.pose.apply(local)
                pos[1] = top - half_h
            else:
                z = rng.uniform(2.9, 5.5)
                x = rng.uniform(-0.5, 0.5) * z * camera.width / camera.fx
                pos = np.array([x, GROUND_Y - half_h, z])
            pose = Sim3(1.0, yaw_matrix(yaw), pos)
            if not _in_frame(mesh, pose, camera):
                continue
            clash = False
            for j, other in enumerate(objects):
                if on_table and j == 0:
                    continue
                gap = np.hypot(*(pos - other.pose.t)[[0, 2]])
                if gap < foot + other.footprint + 0.05:
                    clash = True
                    break
            if clash:
                continue
            placed = True
            break
        if not placed:
            raise PlacementError(
                f"placement failed for object {k} after {max_retries} retries ({attempts} attempts total)",
                max_retries,
            )
        objects.append(SceneObject(f"{shape} {k}", shape, mesh, pose, 0 if on_table else None, foot))

    scene = SyntheticScene(camera, background, objects, [], [], [], [], [], seed)
    settings = RenderSettings(camera)
    scene.amodal = [render(o.mesh, o.pose, settings)[2] for o in objects]
    scene.present, scene.order = _removal_sequence(scene)
    scene.images, scene.disparities, _ = _render_layers(camera, background, objects, scene.present)
    scene.info = {"count": count, "shapes": list(shapes), "support": support}
    return scene


def ghost_scene(seed: int = 0, shift: float | None = None, camera: Camera | None = None) -> SyntheticScene:
    """One box whose removal leaves a slightly shifted copy behind.

    The layers show the box, then its ghost, then the empty background.
    By default the ghost is offset sideways so the two posed boxes overlap
    with volumetric IoU 0.95.
    """
    camera = camera or default_camera()
    rng = np.random.default_rng(seed)
    background = _background_mesh(rng)
    size = (0.8, 0.6, 0.7)
    mesh = TriangleMesh(box_mesh(size).vertices, box_mesh(size).triangles, _object_colors(rng, 8))
    pos = np.array([0.0, GROUND_Y - size[1] / 2.0, 3.8])
    if shift is None:
        # (w - d) / (w + d) = 0.95 for a slide of d along the box's x axis
        shift = size[0] * 0.05 / 1.95
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    rot = yaw_matrix(yaw)
    first = SceneObject("box 0", "box", mesh, Sim3(1.0, rot, pos))
    second = SceneObject("box 0", "box", mesh, Sim3(1.0, rot, pos + rot @ np.array([shift, 0.0, 0.0])))
    objects = [first, second]
    present = [[0], [1], []]
    scene = SyntheticScene(camera, background, objects, present, [0, 1], [], [], [], seed)
    scene.images, scene.disparities, scene.amodal = _render_layers(camera, background, objects, present)
    scene.info = {"count": 1, "ghost_shift": shift}
    return scene


def scene_extent(scene: SyntheticScene) -> float:
    """Bounding-box diagonal of all ground-truth objects in camera space."""
    if not scene.objects:
        return 0.0
    pts = merge_meshes([o.posed() for o in scene.objects]).vertices
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
