"""Single-image scene decomposition and layout assembly.

Stage one peels objects off the input image one at a time (propose,
segment, remove) and records every intermediate image.  Stage two aligns
the per-layer disparities, generates and fits a mesh for every removed
object, drops near-duplicates and tessellates what is left into a
background mesh.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

from .backends.base import BackendSuite
from .fitting import FitConfig, FitFailure, Unfittable, fit_object, overlap_scan
from .geometry import Camera, TriangleMesh, tessellate_background
from .meshio import read_obj, write_obj
from .raster import (
    as_image,
    as_mask,
    dilate,
    load_disparity,
    load_image,
    load_mask,
    mask_apply,
    save_disparity,
    save_image,
    save_mask,
)
from .refine import RefineConfig, refine_disparities
from .sim3 import Sim3

__all__ = [
    "PipelineConfig",
    "PipelineError",
    "LayerSequence",
    "LayoutObject",
    "SceneLayout",
    "decompose",
    "reconstruct",
    "run",
    "write_outputs",
    "save_layers",
    "load_layers",
    "save_layout",
    "load_layout",
]

BACKGROUND_DISPLAY_COLOR = (0.5, 0.5, 0.5)


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    max_iterations: int = 32
    seg_dilation: int = 0
    removal_dilation: int = 3
    refine: RefineConfig = field(default_factory=RefineConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    filter_enabled: bool = True
    filter_threshold: float = 0.9
    filter_measure: str = "volumetric"
    filter_resolution: int = 64
    depth_align: bool = True
    discontinuity_ratio: float | None = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 < self.filter_threshold <= 1.0:
            raise ValueError("filter_threshold must lie in (0, 1]")
        if self.seg_dilation < 0 or self.removal_dilation < 0:
            raise ValueError("dilation radii must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if isinstance(d.get("refine"), dict):
            d["refine"] = RefineConfig(**d["refine"])
        if isinstance(d.get("fit"), dict):
            d["fit"] = FitConfig.from_dict(d["fit"])
        return cls(**d)


@dataclass
class LayerSequence:
    images: list
    masks: list
    disparities: list
    labels: list
    camera: Camera
    removal_masks: list = field(default_factory=list)
    stop_reason: str = ""
    passes: int = 0

    def __post_init__(self):
        if not (len(self.images) == len(self.masks) + 1 == len(self.disparities)):
            raise ValueError("need one more image and disparity than masks")
        if len(self.labels) != len(self.masks):
            raise ValueError("need one label per mask")
        shape = self.camera.shape
        for img in self.images:
            if as_image(img).shape[:2] != shape:
                raise ValueError("image dimensions differ from the camera")
        for d in self.disparities:
            if d.shape != shape:
                raise ValueError("disparity dimensions differ from the camera")
        if not self.removal_masks:
            self.removal_masks = [m.copy() for m in self.masks]

    def __len__(self):
        return len(self.images)


@dataclass
class LayoutObject:
    id: str
    label: str
    mesh: TriangleMesh
    pose: Sim3

    def posed(self) -> TriangleMesh:
        return self.mesh.transformed(self.pose)


@dataclass
class SceneLayout:
    objects: list
    background: TriangleMesh | None
    camera: Camera

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")


# -- stage one ---------------------------------------------------------------


def _call(role, iteration, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise PipelineError(f"iteration {iteration}: {role} failed: {exc}") from exc


def decompose(image, backends: BackendSuite, cfg: PipelineConfig | None = None) -> LayerSequence:
    """Iteratively remove objects, nearest first, and record every layer."""
    cfg = cfg or PipelineConfig()
    current = as_image(image)
    images, masks, removal, labels = [current], [], [], []
    empty_streak = 0
    stop = "max iterations"
    passes = 0
    while passes < cfg.max_iterations:
        passes += 1
        prop = _call("proposer", passes, backends.proposer.propose, current)
        if prop.empty:
            stop = "empty proposal"
            break
        # secondary objects go first; the main object waits for a later pass
        queue = list(prop.secondary_objects) or [prop.visible_object]
        for label in queue:
            m = as_mask(_call("segmenter", passes, backends.segmenter.segment, current, label), current.shape)
            if not m.any():
                empty_streak += 1
                break
            empty_streak = 0
            seg = dilate(m, cfg.seg_dilation)
            rm = dilate(m, cfg.removal_dilation)
            nxt = as_image(_call("remover", passes, backends.remover.remove, current, rm, label))
            if nxt.shape != current.shape:
                raise PipelineError(f"iteration {passes}: remover changed the image size")
            masks.append(seg)
            removal.append(rm)
            labels.append(label)
            images.append(nxt)
            current = nxt
        if empty_streak >= 2:
            stop = "no object detected twice"
            break
    disps = []
    camera = None
    for n, img in enumerate(images):
        d, cam = _call("depth estimator", n, backends.depth_estimator.estimate_disparity, img)
        if camera is None:
            camera = cam
        elif cam != camera:
            raise PipelineError(f"layer {n}: depth estimator returned different intrinsics")
        disps.append(d)
    return LayerSequence(images, masks, disps, labels, camera, removal, stop, passes)


# -- stage two ---------------------------------------------------------------


def reconstruct(layers: LayerSequence, backends: BackendSuite, cfg: PipelineConfig | None = None,
                timings: dict | None = None):
    """Fit a mesh for every removed object and tessellate the background.

    Returns ``(layout, report)``; ``report`` records refinement losses, the
    fitting branch of each object, skips and filter decisions.
    """
    cfg = cfg or PipelineConfig()
    timings = {} if timings is None else timings
    cam = layers.camera
    report = {"refinement": {"enabled": bool(cfg.depth_align and len(layers) >= 2)}, "objects": []}

    t0 = time.perf_counter()
    disps = list(layers.disparities)
    if report["refinement"]["enabled"]:
        pair_masks = layers.removal_masks if cfg.refine.use_removal_masks else layers.masks
        res = refine_disparities(disps, layers.images, pair_masks, cfg.refine)
        disps = res.disparities
        report["refinement"].update(initial_loss=res.initial_loss, final_loss=res.final_loss)
    timings["refine"] = time.perf_counter() - t0

    fitted = []
    timings["fit"] = []
    for n, (mask, label) in enumerate(zip(layers.masks, layers.labels)):
        t0 = time.perf_counter()
        entry = {"index": n, "label": label, "status": "fitted"}
        img = layers.images[n]
        try:
            mesh = _call("mesh generator", n, backends.mesh_generator.generate_mesh, mask_apply(img, mask))
            pose, diag = fit_object(img, mask, disps[n], mesh, cam,
                                    backends.rotation_estimator, backends.tracker, cfg.fit)
            entry["fit"] = diag.to_dict()
            fitted.append((n, label, mesh, pose))
        except (Unfittable, FitFailure) as exc:
            entry["status"] = "skipped"
            entry["error"] = str(exc)
            if getattr(exc, "diagnostics", None) is not None:
                entry["fit"] = exc.diagnostics.to_dict()
        report["objects"].append(entry)
        timings["fit"].append(time.perf_counter() - t0)

    t0 = time.perf_counter()
    if cfg.filter_enabled and fitted:
        records = overlap_scan([(m, p) for _, _, m, p in fitted], cfg.filter_threshold,
                               cfg.filter_measure, cfg.filter_resolution)
    else:
        records = [{"kept": True, "iou": 0.0, "against": None} for _ in fitted]
    objects = []
    for (n, label, mesh, pose), rec in zip(fitted, records):
        entry = report["objects"][n]
        against = rec["against"]
        entry["filter"] = {"iou": rec["iou"], "against": None if against is None else fitted[against][0]}
        if rec["kept"]:
            objects.append(LayoutObject(f"obj_{n:03d}", label, mesh, pose))
        else:
            entry["status"] = "filtered"
    timings["filter"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    background = tessellate_background(disps[-1], cam, layers.images[-1], cfg.discontinuity_ratio)
    timings["background"] = time.perf_counter() - t0
    report["background"] = {"vertices": len(background.vertices), "triangles": len(background.triangles)}
    report["counts"] = {
        "masks": len(layers.masks),
        "fitted": len(fitted),
        "skipped": sum(e["status"] == "skipped" for e in report["objects"]),
        "filtered": sum(e["status"] == "filtered" for e in report["objects"]),
        "kept": len(objects),
    }
    return SceneLayout(objects, background, cam), report


def run(source, backends: BackendSuite, cfg: PipelineConfig | None = None):
    """Decompose then reconstruct.

    ``source`` is an image array or a directory holding ``layer_000.png``.
    Returns ``(layers, layout, report, timings)``.  The report holds no
    wall-clock values, so it is reproducible; timings are separate.
    """
    cfg = cfg or PipelineConfig()
    if isinstance(source, (str, os.PathLike)):
        image = load_image(os.path.join(source, "layer_000.png"))
    else:
        image = as_image(source)
    timings = {}
    t0 = time.perf_counter()
    layers = decompose(image, backends, cfg)
    timings["decompose"] = time.perf_counter() - t0
    layout, report = reconstruct(layers, backends, cfg, timings)
    report = {
        "layers": len(layers),
        "labels": list(layers.labels),
        "passes": layers.passes,
        "stop_reason": layers.stop_reason,
        "backend": backends.kind,
        **report,
    }
    return layers, layout, report, timings


# -- files -------------------------------------------------------------------


def save_layers(layers: LayerSequence, root):
    os.makedirs(root, exist_ok=True)
    for n, img in enumerate(layers.images):
        save_image(img, os.path.join(root, f"layer_{n:03d}.png"))
        save_disparity(layers.disparities[n], os.path.join(root, f"disp_{n:03d}.pfm"))
    for n, m in enumerate(layers.masks):
        save_mask(m, os.path.join(root, f"mask_{n:03d}.png"))
        save_mask(layers.removal_masks[n], os.path.join(root, f"removal_mask_{n:03d}.png"))
    layers.camera.save(os.path.join(root, "camera.json"))
    _dump_json(list(layers.labels), os.path.join(root, "labels.json"))


def load_layers(root) -> LayerSequence:
    from .backends.fixture import count_layers

    n = count_layers(root)
    images = [load_image(os.path.join(root, f"layer_{i:03d}.png")) for i in range(n)]
    disps = [load_disparity(os.path.join(root, f"disp_{i:03d}.pfm")) for i in range(n)]
    masks = [load_mask(os.path.join(root, f"mask_{i:03d}.png")) for i in range(n - 1)]
    removal = [
        load_mask(p) if os.path.exists(p) else masks[i]
        for i, p in enumerate(os.path.join(root, f"removal_mask_{i:03d}.png") for i in range(n - 1))
    ]
    labels_path = os.path.join(root, "labels.json")
    labels = [""] * (n - 1)
    if os.path.exists(labels_path):
        with open(labels_path) as fh:
            labels = json.load(fh)
    return LayerSequence(images, masks, disps, labels, Camera.load(os.path.join(root, "camera.json")), removal)


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_layout(layout: SceneLayout, root):
    os.makedirs(os.path.join(root, "objects"), exist_ok=True)
    entries = []
    for obj in layout.objects:
        rel = f"objects/{obj.id}.obj"
        write_obj(obj.mesh, os.path.join(root, rel))
        entries.append({"id": obj.id, "label": obj.label, "mesh": rel, "transform": obj.pose.to_json()})
    data = {"camera": layout.camera.to_dict(), "objects": entries, "background": None}
    if layout.background is not None:
        write_obj(layout.background, os.path.join(root, "background.obj"))
        data["background"] = {"mesh": "background.obj", "display_color": list(BACKGROUND_DISPLAY_COLOR)}
    _dump_json(data, os.path.join(root, "layout.json"))


def load_layout(root) -> SceneLayout:
    with open(os.path.join(root, "layout.json")) as fh:
        data = json.load(fh)
    objects = [
        LayoutObject(e["id"], e["label"], read_obj(os.path.join(root, e["mesh"])), Sim3.from_json(e["transform"]))
        for e in data["objects"]
    ]
    bg = data.get("background")
    background = read_obj(os.path.join(root, bg["mesh"])) if bg else None
    return SceneLayout(objects, background, Camera.from_dict(data["camera"]))


def write_outputs(out_dir, layers: LayerSequence, layout: SceneLayout, report: dict,
                  timings: dict | None = None, manifest: dict | None = None):
    os.makedirs(out_dir, exist_ok=True)
    save_layout(layout, out_dir)
    save_layers(layers, os.path.join(out_dir, "layers"))
    _dump_json(report, os.path.join(out_dir, "report.json"))
    if timings is not None:
        _dump_json(timings, os.path.join(out_dir, "timings.json"))
    if manifest is not None:
        _dump_json(manifest, os.path.join(out_dir, "manifest.json"))
