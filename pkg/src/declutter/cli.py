"""Command-line entry points.

Exit status: 0 on success, 1 on a runtime failure, 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np
import scipy

from . import __version__
from .backends import (
    BackendError,
    NoTracks,
    PlacementError,
    adapter_suite,
    fixture_suite,
    load_prompts,
    oracle_suite,
)
from .backends.fixture import count_layers
from .fitting import BaselineRotation, CorrespondenceSet, FitConfig, FitFailure, Unfittable, fit_object
from .geometry import Camera
from .meshio import read_obj
from .metrics import evaluate_layouts
from .pipeline import PipelineConfig, PipelineError, load_layers, load_layout, run, write_outputs
from .raster import DecodeError, load_disparity, load_image, load_mask, save_disparity
from .refine import RefineConfig, RefinementDiverged, refine_disparities
from .synthio import placement_errors, scene_from_params, write_fixture

__all__ = ["main", "build_parser"]


class UsageError(Exception):
    pass


def _versions():
    return {"declutter": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _dump(obj, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(sub, config, seed, inputs, outputs):
    return {"subcommand": sub, "config": config, "seed": seed, "inputs": inputs, "outputs": outputs,
            "versions": _versions()}


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


# -- synth -------------------------------------------------------------------


def cmd_synth(args):
    shapes = tuple(s.strip() for s in args.shapes.split(",") if s.strip())
    bad = [s for s in shapes if s not in ("box", "sphere")]
    if bad:
        raise UsageError(f"unknown shape(s): {', '.join(bad)}")
    if args.objects < 0:
        raise UsageError("--objects must be >= 0")
    if args.ghost:
        params = {"kind": "ghost", "seed": args.seed}
    else:
        params = {"kind": "random", "objects": args.objects, "shapes": list(shapes), "seed": args.seed,
                  "support": args.support}
    scene = scene_from_params(params)
    _, world = oracle_suite(scene, corruption=not args.no_corruption)
    params["corruption"] = not args.no_corruption
    write_fixture(scene, world, args.out, params)
    _dump(_manifest("synth", params, args.seed, [], [args.out]), os.path.join(args.out, "manifest.json"))
    print(f"wrote {scene.num_layers} layers to {args.out}")


# -- run ---------------------------------------------------------------------


def _pipeline_config(args):
    raw = _read_json(args.config) if args.config else {}
    adapters = raw.pop("adapters", None)
    prompts = raw.pop("prompts", None)
    cfg = PipelineConfig.from_dict(raw)
    if args.no_depth_align:
        cfg = replace(cfg, depth_align=False)
    if args.no_filter:
        cfg = replace(cfg, filter_enabled=False)
    if args.seed is not None:
        cfg = replace(cfg, refine=replace(cfg.refine, seed=args.seed))
    return cfg, adapters, prompts


def _backends_for(kind, scene_dir, adapters, prompts):
    if kind == "oracle":
        params_path = os.path.join(scene_dir, "scene.json")
        if not os.path.exists(params_path):
            raise UsageError(f"oracle backend needs {params_path} (written by 'synth')")
        params = _read_json(params_path)
        scene = scene_from_params(params)
        suite, _ = oracle_suite(scene, corruption=params.get("corruption", True))
        return suite, scene.images[0], scene
    if kind == "fixture":
        suite, fx = fixture_suite(scene_dir)
        return suite, fx.images[0], None
    if kind == "adapter":
        if not adapters:
            raise UsageError("adapter backend needs an 'adapters' map in --config")
        suite, _ = adapter_suite(adapters, prompts)
        return suite, load_image(os.path.join(scene_dir, "layer_000.png")), None
    raise UsageError(f"unknown backend {kind!r}")


def _run_one(kind, scene_dir, out_dir, cfg_dict, adapters, prompts, seed):
    cfg = PipelineConfig.from_dict(cfg_dict)
    suite, image, scene = _backends_for(kind, scene_dir, adapters, prompts)
    layers, layout, report, timings = run(image, suite, cfg)
    if scene is not None:
        report["placement"] = placement_errors(layout, scene)
    manifest = _manifest("run", {"pipeline": cfg.to_dict(), "backend": kind}, seed, [scene_dir], [out_dir])
    write_outputs(out_dir, layers, layout, report, timings, manifest)
    return out_dir, report["counts"]


def cmd_run(args):
    cfg, adapters, prompts = _pipeline_config(args)
    if isinstance(prompts, str):
        prompts = load_prompts(prompts)
    scenes = args.scene
    for s in scenes:
        if not os.path.isdir(s):
            raise UsageError(f"scene directory {s} does not exist")
    outs = [args.out] if len(scenes) == 1 else [os.path.join(args.out, os.path.basename(os.path.normpath(s))) for s in scenes]
    jobs = [(args.backend, s, o, cfg.to_dict(), adapters, prompts, args.seed) for s, o in zip(scenes, outs)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_one, *zip(*jobs)))
    else:
        results = [_run_one(*j) for j in jobs]
    for out, counts in results:
        print(f"{out}: {counts['kept']} objects kept of {counts['masks']} removed")


# -- fit ---------------------------------------------------------------------


def cmd_fit(args):
    cam = Camera.load(args.camera)
    img = load_image(args.image)
    mask = load_mask(args.mask)
    disp = load_disparity(args.disp)
    mesh = read_obj(args.mesh)
    cfg = FitConfig(S=args.S, K=args.K, n_min=args.n_min)

    class _Tracks:
        def track(self, image, rendered, *, mask=None, render_pose=None):
            return CorrespondenceSet.load(args.tracks)

    class _Rotation:
        def estimate_rotation(self, masked_image, mask, sweep):
            rot = np.asarray(_read_json(args.rotation), dtype=np.float64)
            if rot.ndim == 3:  # a per-object list as written by ``synth``
                rot = rot[args.index]
            return rot.reshape(3, 3)

    rot = _Rotation() if args.rotation else BaselineRotation()
    trk = _Tracks() if args.tracks else NoTracks()
    pose, diag = fit_object(img, mask, disp, mesh, cam, rot, trk, cfg)
    _dump({"transform": pose.to_json(), "diagnostics": diag.to_dict(), "config": cfg.to_dict()}, args.out)
    print(f"{diag.branch}: scale {pose.s:.6g}")


# -- refine-depth ------------------------------------------------------------


def cmd_refine(args):
    if args.layers:
        layers = load_layers(args.layers)
        disps, images = layers.disparities, layers.images
        masks = layers.removal_masks if args.use_removal_masks else layers.masks
    else:
        if not (args.disp and args.image):
            raise UsageError("give --layers DIR or --disp/--image/--mask lists")
        disps = [load_disparity(p) for p in args.disp]
        images = [load_image(p) for p in args.image]
        masks = [load_mask(p) for p in (args.mask or [])]
    raw = _read_json(args.config) if args.config else {}
    raw = dict(raw.get("refine", raw))  # accept a full pipeline config too
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.use_removal_masks:
        raw["use_removal_masks"] = True
    try:
        cfg = RefineConfig(**raw)
    except TypeError as exc:
        raise UsageError(f"bad refine config: {exc}") from exc
    try:
        res = refine_disparities(disps, images, masks, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    for n, d in enumerate(res.disparities):
        save_disparity(d, os.path.join(args.out, f"refined_{n:03d}.pfm"))
    sidecar = {"config": cfg.to_dict(), "initial_loss": res.initial_loss, "final_loss": res.final_loss,
               "layers": len(res.disparities)}
    _dump(sidecar, os.path.join(args.out, "refine.json"))
    print(f"loss {res.initial_loss:.6g} -> {res.final_loss:.6g}")


# -- evaluate ----------------------------------------------------------------


def _evaluate_one(pred_dir, gt_dir, tau, samples, seed, with_background):
    pred = load_layout(pred_dir)
    gt = load_layout(gt_dir)
    pred_masks = None
    layers_dir = os.path.join(pred_dir, "layers")
    if os.path.isdir(layers_dir) and count_layers(layers_dir) > 1:
        pred_masks = load_layers(layers_dir).masks
    rep = evaluate_layouts(pred, gt, gt.camera, tau, samples, seed, with_background, pred_masks)
    return {**rep.to_dict(), "config": {"pred": pred_dir, "gt": gt_dir, "tau": tau, "samples": samples,
                                        "seed": seed, "with_background": with_background}}


def cmd_evaluate(args):
    if len(args.pred) != len(args.gt):
        raise UsageError("--pred and --gt need the same number of directories")
    jobs = [(p, g, args.tau, args.samples, args.seed, args.with_background) for p, g in zip(args.pred, args.gt)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            reports = list(pool.map(_evaluate_one, *zip(*jobs)))
    else:
        reports = [_evaluate_one(*j) for j in jobs]
    if len(reports) == 1:
        out = reports[0]
    else:
        keys = ("chamfer", "f1", "obj_fs", "seg_iou", "rand_index", "mesh_iou")
        out = {"scenes": reports, "mean": {k: float(np.mean([r[k] for r in reports])) for k in keys}}
    path = args.out if args.out.endswith(".json") else os.path.join(args.out, "report.json")
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    _dump(out, path)
    for r in reports:
        print(f"f1 {r['f1']:.2f}  chamfer {r['chamfer']:.4g}  obj_fs {r['obj_fs']:.2f}  mesh_iou {r['mesh_iou']:.3f}")


# -- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="declutter", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic scene as a fixture directory")
    s.add_argument("--out", required=True)
    s.add_argument("--objects", type=int, default=3)
    s.add_argument("--shapes", default="box,sphere")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--support", action="store_true", help="first two objects are a table and an item on it")
    s.add_argument("--no-corruption", action="store_true", help="store exact disparities")
    s.add_argument("--ghost", action="store_true",
                   help="one box whose removal leaves a slightly shifted duplicate (ignores --objects)")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", help="decompose and reconstruct a scene")
    r.add_argument("--scene", required=True, nargs="+")
    r.add_argument("--backend", required=True, choices=("oracle", "fixture", "adapter"))
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--no-depth-align", action="store_true")
    r.add_argument("--no-filter", action="store_true")
    r.add_argument("--seed", type=int)
    r.add_argument("--jobs", type=int, default=1, help="scenes processed in parallel")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("fit", help="place one mesh into a scene")
    f.add_argument("--image", required=True)
    f.add_argument("--mask", required=True)
    f.add_argument("--disp", required=True)
    f.add_argument("--camera", required=True)
    f.add_argument("--mesh", required=True)
    f.add_argument("--rotation", help="JSON 3x3 rotation or list of them (default: silhouette search)")
    f.add_argument("--index", type=int, default=0, help="entry to use when --rotation holds a list")
    f.add_argument("--tracks", help="JSON [x1, y1, x2, y2, conf] rows")
    f.add_argument("--S", type=int, default=8)
    f.add_argument("--K", type=float, default=0.5)
    f.add_argument("--n-min", type=int, default=12)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    d = sub.add_parser("refine-depth", help="align per-layer disparities")
    d.add_argument("--layers", help="directory in the layer file layout")
    d.add_argument("--disp", nargs="+")
    d.add_argument("--image", nargs="+")
    d.add_argument("--mask", nargs="+")
    d.add_argument("--config", help="JSON with RefineConfig fields")
    d.add_argument("--seed", type=int)
    d.add_argument("--use-removal-masks", action="store_true")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_refine)

    e = sub.add_parser("evaluate", help="score a layout against ground truth")
    e.add_argument("--pred", required=True, nargs="+")
    e.add_argument("--gt", required=True, nargs="+")
    e.add_argument("--jobs", type=int, default=1, help="scene pairs evaluated in parallel")
    e.add_argument("--out", required=True)
    e.add_argument("--tau", type=float, default=0.1)
    e.add_argument("--samples", type=int, default=10000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--with-background", action="store_true")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"declutter {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (Unfittable, FitFailure, PlacementError, PipelineError, BackendError, RefinementDiverged,
            DecodeError, OSError, ValueError) as exc:
        print(f"declutter {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
