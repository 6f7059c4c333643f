import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from declutter.geometry import yaw_matrix
from declutter.sim3 import (
    DegenerateSource,
    IcpConfig,
    InsufficientPoints,
    NoInitialOverlap,
    Sim3,
    robust_frame,
    rotation_angle,
    run_trimmed_icp,
    sim3_least_squares,
    trimmed_icp,
)

seeds = st.integers(0, 2**31 - 1)


def random_sim3(rng, s_range=(0.1, 10.0)):
    R = Rotation.random(random_state=rng.integers(2**31)).as_matrix()
    return Sim3(rng.uniform(*s_range), R, rng.normal(0, 3, 3))


def objective(T, xb, xa):
    return float(np.sum((T.apply(xb) - xa) ** 2))


def test_sim3_validation():
    with pytest.raises(ValueError):
        Sim3(0.0)
    with pytest.raises(ValueError):
        Sim3(1.0, np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        Sim3(1.0, np.eye(3) * 1.01)


def test_sim3_json_is_row_major_4x4():
    T = Sim3(2.0, yaw_matrix(0.3), [1, 2, 3])
    rows = T.to_json()
    assert rows[3] == [0, 0, 0, 1]
    assert np.allclose(np.array(rows)[:3, :3], 2.0 * yaw_matrix(0.3))
    back = Sim3.from_json(rows)
    assert np.isclose(back.s, 2.0) and np.allclose(back.R, T.R) and np.allclose(back.t, [1, 2, 3])


@given(seeds)
def test_compose_apply_and_inverse(seed):
    rng = np.random.default_rng(seed)
    T1, T2 = random_sim3(rng), random_sim3(rng)
    x = rng.normal(size=(10, 3))
    lhs = T2.compose(T1).apply(x)
    rhs = T2.apply(T1.apply(x))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.abs(rhs).max())
    assert np.allclose(T1.inverse().apply(T1.apply(x)), x, atol=1e-9)


def test_least_squares_examples():
    x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
    T = sim3_least_squares(x, x)
    assert np.isclose(T.s, 1) and np.allclose(T.R, np.eye(3)) and np.allclose(T.t, 0)
    rng = np.random.default_rng(0)
    xb = rng.normal(size=(8, 3))
    T = sim3_least_squares(xb, xb + [1, 2, 3])
    assert abs(T.s - 1) < 1e-12 and np.allclose(T.R, np.eye(3), atol=1e-12) and np.allclose(T.t, [1, 2, 3], atol=1e-12)


def test_least_squares_recovers_random_transform():
    rng = np.random.default_rng(42)
    R = Rotation.random(random_state=7).as_matrix()
    true = Sim3(2.5, R, rng.normal(size=3))
    xb = rng.normal(size=(10, 3))
    est = sim3_least_squares(xb, true.apply(xb))
    assert abs(est.s - 2.5) / 2.5 < 1e-9
    assert rotation_angle(est.R @ R.T) < 1e-9
    assert np.linalg.norm(est.t - true.t) < 1e-9


def test_least_squares_errors():
    with pytest.raises(InsufficientPoints):
        sim3_least_squares(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(DegenerateSource):
        sim3_least_squares(np.ones((5, 3)), np.random.default_rng(0).normal(size=(5, 3)))
    with pytest.raises(ValueError):
        sim3_least_squares(np.zeros((4, 3)), np.zeros((5, 3)))


@given(seeds, st.integers(4, 40))
def test_least_squares_inverts_known_transform(seed, n):
    rng = np.random.default_rng(seed)
    T = random_sim3(rng)
    x = rng.normal(size=(n, 3))
    est = sim3_least_squares(T.apply(x), x)
    ident = est.compose(T)
    assert abs(ident.s - 1) < 1e-8
    assert rotation_angle(ident.R) < 1e-8
    assert np.linalg.norm(ident.t) < 1e-8


@given(seeds)
def test_closed_form_is_a_local_minimum(seed):
    rng = np.random.default_rng(seed)
    xb = rng.normal(size=(12, 3))
    xa = random_sim3(rng).apply(xb) + rng.normal(0, 0.3, (12, 3))
    T = sim3_least_squares(xb, xa)
    base = objective(T, xb, xa)
    for _ in range(50):
        dR = Rotation.from_rotvec(rng.normal(0, 1e-3, 3)).as_matrix()
        P = Sim3(T.s * (1 + rng.normal(0, 1e-3)), dR @ T.R, T.t + rng.normal(0, 1e-3, 3))
        assert objective(P, xb, xa) >= base - 1e-12 * max(1.0, base)


def test_reflection_is_fixed():
    # a mirrored target: the unconstrained Procrustes solution is a reflection
    rng = np.random.default_rng(5)
    xb = rng.normal(size=(20, 3))
    xa = xb * [1, 1, -1]
    Sigma = (xa - xa.mean(0)).T @ (xb - xb.mean(0))
    u, _, vt = np.linalg.svd(Sigma)
    assert np.linalg.det(u @ vt) < 0
    T = sim3_least_squares(xb, xa)
    assert np.isclose(np.linalg.det(T.R), 1.0, atol=1e-9)
    assert np.allclose(T.R.T @ T.R, np.eye(3), atol=1e-9)


def test_icp_config_validation_and_defaults():
    with pytest.raises(ValueError):
        IcpConfig(rho=0)
    with pytest.raises(ValueError):
        IcpConfig(rho=1.5)
    with pytest.raises(ValueError):
        IcpConfig(v=-1)
    cfg = IcpConfig().resolved(np.array([[0, 0, 0], [3, 4, 0.0]]))
    assert np.isclose(cfg.v, 0.05) and np.isclose(cfg.r, 0.25)
    assert (IcpConfig().rho, IcpConfig().t_max, IcpConfig().delta, IcpConfig().n_min) == (0.8, 50, 1e-6, 8)


def surface_points(rng, n=1500):
    """Points on an L-shaped solid (asymmetric, so the pose is unique)."""
    from declutter.geometry import TriangleMesh, box_mesh, merge_meshes
    from declutter.metrics import sample_surface

    a = box_mesh((2, 0.5, 0.6))
    b = box_mesh((0.6, 1.0, 0.6))
    b = TriangleMesh(b.vertices + [-0.7, 0.75, 0], b.triangles)
    return sample_surface(merge_meshes([a, b]), n, seed=int(rng.integers(2**31)))


def test_icp_identity_fixed_point():
    p = surface_points(np.random.default_rng(0), 200)
    res = run_trimmed_icp(p, p, IcpConfig(v=1e-3, r=0.5, rho=1.0))
    assert res.iterations <= 2
    assert abs(res.transform.s - 1) < 1e-6 and rotation_angle(res.transform.R) < 1e-6
    assert np.linalg.norm(res.transform.t) < 1e-6


def test_icp_recovers_clean_transform():
    rng = np.random.default_rng(1)
    pb = surface_points(rng)
    T = Sim3(1.2, yaw_matrix(np.radians(10)), [0.05, -0.02, 0.03])
    est = trimmed_icp(pb, T.apply(pb), IcpConfig(v=0.02, r=0.25, rho=1.0, t_max=100, delta=1e-9))
    assert np.degrees(rotation_angle(est.R @ T.R.T)) < 0.5
    assert abs(est.s / T.s - 1) < 0.01


def test_icp_trims_distant_outliers():
    rng = np.random.default_rng(2)
    pb = surface_points(rng)
    T = Sim3(1.2, yaw_matrix(np.radians(10)), [0.05, -0.02, 0.03])
    pa = T.apply(pb)
    bad = rng.choice(len(pb), len(pb) // 5, replace=False)
    pb = pb.copy()
    pb[bad] = rng.uniform([3.75, 1.75, -0.25], [4.25, 2.25, 0.25], (len(bad), 3))
    res = run_trimmed_icp(pb, pa, IcpConfig(v=0.02, r=0.25, rho=0.7, t_max=100, delta=1e-9))
    est = res.transform
    assert np.degrees(rotation_angle(est.R @ T.R.T)) < 0.5
    assert abs(est.s / T.s - 1) < 0.01
    # none of the kept source points come from the outlier box
    kept = res.source[res.kept_source]
    assert not np.any(np.all((kept >= [3.7, 1.7, -0.3]) & (kept <= [4.3, 2.3, 0.3]), axis=1))
    assert np.all(np.diff(res.rms_history) <= 0)


def test_icp_no_initial_overlap_carries_count():
    rng = np.random.default_rng(0)
    a, b = rng.random((100, 3)), rng.random((100, 3))
    with pytest.raises(NoInitialOverlap) as err:
        trimmed_icp(a, b, IcpConfig(v=1e-4, r=1e-3, n_min=8))
    assert err.value.count < 8


@given(seeds)
def test_icp_rms_never_increases(seed):
    rng = np.random.default_rng(seed)
    pb = surface_points(rng, 400)
    T = Sim3(rng.uniform(0.7, 1.4), yaw_matrix(rng.uniform(-0.3, 0.3)), rng.normal(0, 0.05, 3))
    pa = T.apply(pb) + rng.normal(0, 0.005, pb.shape)
    res = run_trimmed_icp(pb, pa, IcpConfig(r=0.3, rho=0.7))
    assert res.stop_reason
    assert np.all(np.diff(res.rms_history) <= 0)


def test_robust_frame_ignores_gross_outliers():
    rng = np.random.default_rng(0)
    p = rng.normal(0, 1, (500, 3))
    dirty = np.concatenate([p, rng.normal(100, 1, (50, 3))])
    c, spread = robust_frame(dirty)
    assert np.linalg.norm(c) < 0.3
    assert 1.2 < spread < 2.0
