import numpy as np
import pytest
from hypothesis import given, strategies as st

from declutter.backends import NoTracks, generate_synthetic_scene, oracle_suite, scene_extent
from declutter.geometry import box_mesh, cylinder_mesh, yaw_matrix
from declutter.raster import DisparityGrid, mask_apply
from declutter.render import RenderSettings, render_yaw_sweep
from declutter.sim3 import Sim3
from declutter.fitting import (
    BaselineRotation,
    CorrespondenceSet,
    FitConfig,
    FitFailure,
    Unfittable,
    baseline_rotation_estimate,
    filter_overlapping,
    fit_object,
    normalized_silhouette,
    overlap_scan,
)


@pytest.fixture(scope="module")
def scene_world():
    scene = generate_synthetic_scene(3, seed=0)
    suite, world = oracle_suite(scene, corruption=False)
    return scene, world


def object_inputs(scene, world, n):
    k = scene.order[n]
    img = scene.images[n]
    mask = scene.amodal[k]
    d, cam = world.estimate_disparity(img)
    mesh = world.generate_mesh(mask_apply(img, mask))
    return k, img, mask, d, cam, mesh


def placement_rms(T, world, k, mesh):
    gt = world.true_pose(k).apply(mesh.vertices)
    return float(np.sqrt(np.mean(np.sum((T.apply(mesh.vertices) - gt) ** 2, axis=1))))


class FixedRotation:
    def __init__(self, R):
        self.R = np.asarray(R)

    def estimate_rotation(self, masked_image, mask, sweep):
        return self.R


def test_fit_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        FitConfig(S=0)
    with pytest.raises(ValueError):
        FitConfig(K=1.1)
    with pytest.raises(ValueError):
        FitConfig(n_min=2)
    cfg = FitConfig(S=4, K=0.3)
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
    assert (FitConfig().S, FitConfig().K, FitConfig().n_min) == (8, 0.5, 12)


def test_correspondence_rows_round_trip(tmp_path):
    c = CorrespondenceSet([[1, 2], [3.5, 4]], [[5, 6], [7, 8]], [0.9, 0.1])
    c.save(tmp_path / "t.json")
    back = CorrespondenceSet.load(tmp_path / "t.json")
    assert back.to_rows() == [[1, 2, 5, 6, 0.9], [3.5, 4, 7, 8, 0.1]]
    with pytest.raises(ValueError):
        c.check_bounds((3, 3), (10, 10))
    c.check_bounds((10, 10), (10, 10))
    with pytest.raises(ValueError):
        CorrespondenceSet([[np.nan, 0]], [[0, 0]], [1])
    assert len(CorrespondenceSet.empty()) == 0


@given(st.integers(0, 20), st.integers(0, 20), st.integers(1, 3))
def test_normalized_silhouette_ignores_position_and_scale(dy, dx, k):
    base = np.zeros((8, 8), bool)
    base[1:7, 2:5] = True
    base[5:7, 5:7] = True
    big = np.kron(base, np.ones((k, k), bool))
    canvas = np.zeros((60, 60), bool)
    canvas[dy:dy + big.shape[0], dx:dx + big.shape[1]] = big
    assert np.array_equal(normalized_silhouette(canvas, 8), normalized_silhouette(base, 8))


def test_baseline_rotation_rules():
    settings = RenderSettings(__import__("declutter").backends.default_camera())
    box = box_mesh((1.2, 0.5, 0.5))
    one = render_yaw_sweep(box, 1, settings)
    R, idx = baseline_rotation_estimate(None, np.zeros(settings.camera.shape, bool), one)
    assert idx == 0 and np.allclose(R, np.eye(3))
    cyl = render_yaw_sweep(cylinder_mesh(0.5, 1.0, 64), 8, settings)
    _, idx = baseline_rotation_estimate(None, cyl[3].mask, cyl)
    assert idx == 0
    with pytest.raises(ValueError):
        baseline_rotation_estimate(None, cyl[0].mask, [])


@pytest.mark.parametrize("true_index", range(8))
def test_baseline_rotation_finds_sweep_pose(true_index):
    settings = RenderSettings(__import__("declutter").backends.default_camera())
    box = box_mesh((1.2, 0.5, 0.7))
    sweep = render_yaw_sweep(box, 8, settings)
    _, idx = baseline_rotation_estimate(None, sweep[true_index].mask, sweep)
    err = abs(sweep[idx].yaw - sweep[true_index].yaw) % np.pi  # a box looks the same after a half turn
    assert min(err, np.pi - err) <= np.pi / 8 + 1e-12


def test_least_squares_branch_places_object_exactly(scene_world):
    scene, world = scene_world
    ext = scene_extent(scene)
    for n in range(len(scene.order)):
        k, img, mask, d, cam, mesh = object_inputs(scene, world, n)
        T, diag = fit_object(img, mask, d, mesh, cam, world, world, FitConfig())
        assert diag.branch == "least_squares" and diag.pairs_kept >= 12
        assert diag.residual_rms < 1e-6
        assert placement_rms(T, world, k, mesh) < 1e-3
        assert placement_rms(T, world, k, mesh) < 1e-6 * ext


def test_icp_branch_when_no_pairs_pass(scene_world):
    scene, world = scene_world
    k, img, mask, d, cam, mesh = object_inputs(scene, world, 0)

    class LowConfidence:
        def track(self, image, rendered, *, mask=None, render_pose=None):
            c = world.track(image, rendered, mask=mask, render_pose=render_pose)
            return CorrespondenceSet(c.source, c.rendered, np.full(len(c), 0.4))

    T, diag = fit_object(img, mask, d, mesh, cam, world, LowConfidence(), FitConfig())
    assert diag.branch == "icp" and diag.pairs_kept == 0 and diag.pairs_total > 0
    assert diag.icp_iterations >= 1
    assert placement_rms(T, world, k, mesh) < 0.02 * scene_extent(scene)


def test_pairs_outside_mask_are_dropped(scene_world):
    scene, world = scene_world
    k, img, mask, d, cam, mesh = object_inputs(scene, world, 0)

    class Shifted:
        def track(self, image, rendered, *, mask=None, render_pose=None):
            c = world.track(image, rendered, mask=mask, render_pose=render_pose)
            far = np.tile([[0.0, 0.0]], (len(c), 1))
            return CorrespondenceSet(far, c.rendered, c.confidence)

    _, diag = fit_object(img, mask, d, mesh, cam, world, Shifted(), FitConfig())
    assert diag.pairs_kept == 0 and diag.branch == "icp"


def test_unfittable_small_mask(scene_world):
    scene, world = scene_world
    _, img, mask, d, cam, mesh = object_inputs(scene, world, 0)
    tiny = np.zeros_like(mask)
    ys, xs = np.nonzero(mask)
    tiny[ys[:2], xs[:2]] = True
    with pytest.raises(Unfittable, match="unfittable"):
        fit_object(img, tiny, d, mesh, cam, world, world)


def test_out_of_range_scale_is_a_fit_failure(scene_world):
    scene, world = scene_world
    _, img, mask, d, cam, mesh = object_inputs(scene, world, 0)
    far = DisparityGrid(d.values * 1e-6, d.valid)
    with pytest.raises(FitFailure) as err:
        fit_object(img, mask, far, mesh, cam, world, world)
    assert err.value.diagnostics.branch == "least_squares"
    assert err.value.diagnostics.scale > 1e4


def test_no_overlap_is_a_fit_failure_with_diagnostics(scene_world):
    scene, world = scene_world
    _, img, mask, d, cam, mesh = object_inputs(scene, world, 0)
    from declutter.sim3 import IcpConfig

    cfg = FitConfig(icp=IcpConfig(v=1e-4, r=1e-6))
    with pytest.raises(FitFailure) as err:
        fit_object(img, mask, d, mesh, cam, BaselineRotation(), NoTracks(), cfg)
    assert err.value.diagnostics.branch == "icp" and "overlap" in err.value.diagnostics.message


def test_rotation_is_composed_into_the_result(scene_world):
    """Backend rotation R on mesh M equals identity rotation on M pre-rotated by R^-1."""
    scene, world = scene_world
    _, img, mask, d, cam, mesh = object_inputs(scene, world, 1)
    R = yaw_matrix(1.1)
    T_a, _ = fit_object(img, mask, d, mesh, cam, FixedRotation(R), NoTracks())
    turned = mesh.transformed(Sim3(1.0, R.T, np.zeros(3)))
    T_b, _ = fit_object(img, mask, d, turned, cam, FixedRotation(np.eye(3)), NoTracks())
    assert np.allclose(T_a.apply(mesh.vertices), T_b.apply(turned.vertices), atol=1e-8)


def test_fit_is_deterministic(scene_world):
    scene, world = scene_world
    _, img, mask, d, cam, mesh = object_inputs(scene, world, 2)
    a = fit_object(img, mask, d, mesh, cam, BaselineRotation(), NoTracks())[0]
    b = fit_object(img, mask, d, mesh, cam, BaselineRotation(), NoTracks())[0]
    assert np.array_equal(a.matrix(), b.matrix())


def posed_cube(dx):
    return box_mesh((1.0, 1.0, 1.0)), Sim3(1.0, np.eye(3), [dx, 0, 0])


def test_filter_examples():
    shift_95 = 0.05 / 1.95
    kept = filter_overlapping([posed_cube(0), posed_cube(shift_95)], 0.9)
    assert len(kept) == 1
    shift_50 = 1 / 3
    assert len(filter_overlapping([posed_cube(0), posed_cube(shift_50)], 0.9)) == 2
    # #2 overlaps #1 and is dropped; #3 overlaps only #2, so it survives
    objs = [posed_cube(0), posed_cube(0.02), posed_cube(0.6)]
    rec = overlap_scan(objs, 0.5)
    assert [r["kept"] for r in rec] == [True, False, True]
    assert rec[1]["against"] == 0
    with pytest.raises(ValueError):
        overlap_scan(objs, 0.0)
    with pytest.raises(ValueError):
        overlap_scan(objs, 0.5, measure="nope")


def test_box_measure():
    rec = overlap_scan([posed_cube(0), posed_cube(0.02)], 0.9, measure="box")
    assert not rec[1]["kept"] and rec[1]["iou"] > 0.95


@given(st.lists(st.floats(-1.5, 1.5), min_size=1, max_size=5), st.floats(0.3, 0.95))
def test_filter_is_idempotent(shifts, thr):
    objs = [posed_cube(s) for s in shifts]
    once = filter_overlapping(objs, thr, resolution=16)
    twice = filter_overlapping(once, thr, resolution=16)
    assert [id(o) for o in once] == [id(o) for o in twice]
