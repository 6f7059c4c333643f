"""Writing synthetic scenes to disk as replayable fixture directories."""
from __future__ import annotations

import json
import os

import numpy as np
from scipy.optimize import linear_sum_assignment

from .backends.oracle import OracleWorld
from .backends.synthetic import SyntheticScene, generate_synthetic_scene, ghost_scene, scene_extent
from .fitting import derotated_pose
from .meshio import write_obj
from .metrics import chamfer, sample_surface
from .pipeline import LayoutObject, SceneLayout, save_layout
from .raster import mask_apply, save_disparity, save_image, save_mask

__all__ = ["ground_truth_layout", "write_fixture", "scene_from_params", "placement_errors"]


def ground_truth_layout(scene: SyntheticScene) -> SceneLayout:
    """Objects in their own frames with true poses, plus the true background."""
    objects = [LayoutObject(f"obj_{k:03d}", o.label, o.mesh, o.pose) for k, o in enumerate(scene.objects)]
    return SceneLayout(objects, scene.background, scene.camera)


def placement_errors(layout: SceneLayout, scene: SyntheticScene, samples=2000, seed=0) -> dict:
    """Surface chamfer between each true object and its matched reconstruction.

    Objects are paired one-to-one by smallest chamfer; errors are reported
    as fractions of the scene extent.  Unmatched true objects get None.
    """
    extent = scene_extent(scene)
    gt = [sample_surface(o.posed(), samples, seed=[seed, k]) for k, o in enumerate(scene.objects)]
    pred = [sample_surface(o.posed(), samples, seed=[seed, k]) for k, o in enumerate(layout.objects)]
    per = [None] * len(gt)
    if gt and pred:
        cost = np.array([[chamfer(p, g) for p in pred] for g in gt])
        for i, j in zip(*linear_sum_assignment(cost)):
            per[i] = float(cost[i, j] / extent)
    found = [e for e in per if e is not None]
    return {"extent": extent, "per_object": per, "mean": float(np.mean(found)) if found else None,
            "unmatched": len(per) - len(found)}


def scene_from_params(params: dict) -> SyntheticScene:
    """Rebuild a scene from the ``scene.json`` written by :func:`write_fixture`."""
    if params.get("kind") == "ghost":
        return ghost_scene(params["seed"])
    return generate_synthetic_scene(
        params["objects"], tuple(params["shapes"]), params["seed"], support=params.get("support", False)
    )


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_fixture(scene: SyntheticScene, world: OracleWorld, root, params: dict | None = None):
    """Record every oracle answer the pipeline will ask for.

    Masks are the removed objects' silhouettes in removal order; meshes,
    rotations and tracks are what the oracles return for those masks, so
    a fixture run reproduces an oracle run up to PNG/PFM precision.
    """
    os.makedirs(root, exist_ok=True)
    cam = scene.camera
    for n, img in enumerate(scene.images):
        save_image(img, os.path.join(root, f"layer_{n:03d}.png"))
        save_disparity(world.estimate_disparity(img)[0], os.path.join(root, f"disp_{n:03d}.pfm"))
    cam.save(os.path.join(root, "camera.json"))
    rotations, labels = [], []
    for n, k in enumerate(scene.order):
        mask = scene.amodal[k]
        img = scene.images[n]
        save_mask(mask, os.path.join(root, f"mask_{n:03d}.png"))
        mesh = world.generate_mesh(mask_apply(img, mask))
        write_obj(mesh, os.path.join(root, f"mesh_{n:03d}.obj"))
        rot = world.estimate_rotation(mask_apply(img, mask), mask, None)
        rotations.append([[float(x) for x in row] for row in rot])
        labels.append(scene.objects[k].label)
        pose = derotated_pose(mesh, cam, rot)
        world.track(img, None, mask=mask, render_pose=pose).save(os.path.join(root, f"tracks_{n:03d}.json"))
    _dump([scene.proposal(n).to_dict() for n in range(scene.num_layers)], os.path.join(root, "proposals.json"))
    _dump(labels, os.path.join(root, "labels.json"))
    _dump(rotations, os.path.join(root, "rotations.json"))
    if params is not None:
        _dump(params, os.path.join(root, "scene.json"))
    save_layout(ground_truth_layout(scene), os.path.join(root, "gt"))
