import json
import subprocess

import numpy as np
import pytest
from conftest import LIGHT_REFINE

from declutter.backends import (
    BackendSuite,
    ObjectProposal,
    fixture_suite,
    generate_synthetic_scene,
    oracle_suite,
)
from declutter.geometry import Camera
from declutter.metrics import instance_masks, mesh_iou, object_fscore, sample_surface
from declutter.pipeline import (
    LayerSequence,
    PipelineConfig,
    PipelineError,
    decompose,
    load_layers,
    load_layout,
    run,
    save_layers,
    save_layout,
    write_outputs,
)
from declutter.raster import DisparityGrid
from declutter.synthio import ground_truth_layout, placement_errors, write_fixture


def _cfg(**kw):
    return PipelineConfig(refine=LIGHT_REFINE, **kw)


@pytest.fixture(scope="module")
def scene3():
    return generate_synthetic_scene(3, seed=1)


@pytest.fixture(scope="module")
def oracle_run(scene3):
    suite, world = oracle_suite(scene3)
    return run(scene3.images[0], suite, _cfg()), world


class _Stub:
    """Proposes the same label forever; segmentation finds nothing."""

    def __init__(self, cam):
        self.cam = cam
        self.proposals = 0

    def propose(self, image):
        self.proposals += 1
        return ObjectProposal("phantom")

    def segment(self, image, label):
        return np.zeros(self.cam.shape, bool)

    def remove(self, image, mask, label):
        raise AssertionError("nothing should be removed")

    def estimate_disparity(self, image):
        return DisparityGrid(np.full(self.cam.shape, 0.25)), self.cam


def test_config_roundtrip_and_validation():
    cfg = _cfg(max_iterations=4)
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError, match="bogus"):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        PipelineConfig(max_iterations=0)
    with pytest.raises(ValueError):
        PipelineConfig(filter_threshold=0.0)
    assert PipelineConfig().removal_dilation == 3


def test_layer_sequence_shape_checks(small_camera):
    img = np.zeros((48, 64, 3))
    d = DisparityGrid(np.ones((48, 64)))
    with pytest.raises(ValueError):
        LayerSequence([img, img], [], [d, d], [], small_camera)
    with pytest.raises(ValueError):
        LayerSequence([np.zeros((10, 10, 3))], [], [d], [], small_camera)


def test_empty_scene_gives_one_layer():
    sc = generate_synthetic_scene(0, seed=3)
    suite, _ = oracle_suite(sc)
    layers, layout, report, _ = run(sc.images[0], suite, _cfg())
    assert len(layers) == 1 and layers.masks == []
    assert layout.objects == [] and layers.stop_reason == "empty proposal"
    assert report["refinement"]["enabled"] is False


def test_three_objects_nearest_first(scene3, oracle_run):
    (layers, layout, report, _), _ = oracle_run
    assert len(layers) == 4 and len(layers.masks) == 3
    assert layers.labels == [scene3.objects[k].label for k in scene3.order]
    dist = [np.linalg.norm(scene3.objects[k].pose.t) for k in scene3.order]
    # the first removal is the nearest object overall
    assert dist[0] == min(dist)
    for n in range(len(layers)):
        assert np.array_equal(layers.images[n], scene3.images[n])


def test_support_removes_item_before_table():
    sc = generate_synthetic_scene(2, seed=0, support=True)
    suite, _ = oracle_suite(sc)
    layers = decompose(sc.images[0], suite, _cfg())
    assert layers.labels == [sc.objects[1].label, sc.objects[0].label]


def test_max_iterations_limits_layers(scene3):
    suite, _ = oracle_suite(scene3)
    layers, layout, _, _ = run(scene3.images[0], suite, _cfg(max_iterations=1))
    assert len(layers) == 2 and len(layout.objects) == 1
    assert layers.stop_reason == "max iterations"


def test_two_empty_masks_stop_the_loop(small_camera):
    stub = _Stub(small_camera)
    suite = BackendSuite(stub, stub, stub, stub, stub, stub, stub)
    layers = decompose(np.zeros((48, 64, 3)), suite, _cfg())
    assert stub.proposals == 2 and len(layers) == 1
    assert layers.stop_reason == "no object detected twice"


def test_backend_failure_is_wrapped(small_camera):
    stub = _Stub(small_camera)

    class Broken:
        def propose(self, image):
            raise RuntimeError("boom")

    suite = BackendSuite(Broken(), stub, stub, stub, stub, stub, stub)
    with pytest.raises(PipelineError, match="proposer failed: boom"):
        decompose(np.zeros((48, 64, 3)), suite)


def test_depth_intrinsics_must_agree(small_camera, scene3):
    suite, world = oracle_suite(scene3)
    calls = []

    class Drifting:
        def estimate_disparity(self, image):
            d, cam = world.estimate_disparity(image)
            calls.append(1)
            if len(calls) > 1:
                cam = Camera(cam.fx * 2, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
            return d, cam

    suite.depth_estimator = Drifting()
    with pytest.raises(PipelineError, match="intrinsics"):
        decompose(scene3.images[0], suite, _cfg())


def test_layout_invariants(scene3, oracle_run):
    (layers, layout, report, _), _ = oracle_run
    assert len(layout.objects) <= len(layers.masks)
    assert report["counts"]["kept"] == len(layout.objects)
    final = layers.disparities[-1]
    # refined disparity of the last layer keeps its validity pattern
    assert len(layout.background.vertices) == int(final.valid.sum())
    assert report["refinement"]["final_loss"] < report["refinement"]["initial_loss"]


def test_save_load_roundtrip(tmp_path, oracle_run):
    (layers, layout, _, _), _ = oracle_run
    save_layout(layout, tmp_path / "lay")
    back = load_layout(tmp_path / "lay")
    assert [o.id for o in back.objects] == [o.id for o in layout.objects]
    for a, b in zip(back.objects, layout.objects):
        assert np.allclose(a.mesh.vertices, b.mesh.vertices, atol=1e-12)
        assert np.allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-12)
    save_layers(layers, tmp_path / "layers")
    lb = load_layers(tmp_path / "layers")
    assert len(lb) == len(layers) and lb.labels == layers.labels
    for m1, m2 in zip(lb.masks, layers.masks):
        assert np.array_equal(m1, m2)
    for d1, d2 in zip(lb.disparities, layers.disparities):
        assert np.array_equal(d1.values.astype(np.float32), d2.values.astype(np.float32))


def test_report_is_deterministic(scene3, oracle_run, tmp_path):
    (layers, layout, report, _), _ = oracle_run
    suite, _ = oracle_suite(scene3)
    again = run(scene3.images[0], suite, _cfg())
    assert json.dumps(again[2], sort_keys=True) == json.dumps(report, sort_keys=True)
    write_outputs(tmp_path / "a", layers, layout, report, {"x": 1.0})
    write_outputs(tmp_path / "b", *again)
    assert (tmp_path / "a" / "layout.json").read_bytes() == (tmp_path / "b" / "layout.json").read_bytes()
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_fixture_run_makes_no_subprocess_calls(tmp_path, scene3, monkeypatch):
    _, world = oracle_suite(scene3)
    write_fixture(scene3, world, tmp_path)

    def forbidden(*a, **k):
        raise AssertionError("subprocess used")

    monkeypatch.setattr(subprocess, "run", forbidden)
    monkeypatch.setattr(subprocess, "Popen", forbidden)
    suite, _ = fixture_suite(tmp_path)
    layers, layout, report, _ = run(str(tmp_path), suite, _cfg())
    assert len(layers) == scene3.num_layers
    assert len(layout.objects) == 3


def test_two_boxes_placed_within_two_percent():
    sc = generate_synthetic_scene(2, shapes=("box",), seed=7)
    suite, _ = oracle_suite(sc)
    _, layout, _, _ = run(sc.images[0], suite, _cfg())
    err = placement_errors(layout, sc)
    assert err["unmatched"] == 0
    assert max(err["per_object"]) < 0.02


def test_depth_alignment_matters(scene3, oracle_run):
    (_, aligned, _, _), _ = oracle_run
    suite, _ = oracle_suite(scene3)
    _, raw, report, _ = run(scene3.images[0], suite, _cfg(depth_align=False))
    assert report["refinement"]["enabled"] is False
    assert placement_errors(raw, scene3)["mean"] > placement_errors(aligned, scene3)["mean"]


def test_clean_depth_reconstructs_exactly():
    sc = generate_synthetic_scene(3, seed=6)
    suite, _ = oracle_suite(sc, corruption=False)
    _, layout, _, _ = run(sc.images[0], suite, _cfg())
    gt = ground_truth_layout(sc)
    gp = [sample_surface(o.posed(), 4000, seed=[0, i]) for i, o in enumerate(gt.objects)]
    pp = [sample_surface(o.posed(), 4000, seed=[1, i]) for i, o in enumerate(layout.objects)]
    assert object_fscore(pp, gp, 0.1) >= 99.0
    masks = list(instance_masks(sc.visible_ids(0)).values())
    assert mesh_iou(layout, masks, sc.camera) >= 0.9
