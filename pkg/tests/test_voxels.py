import numpy as np
import pytest
from hypothesis import given, strategies as st

from declutter.geometry import TriangleMesh, box_mesh, sphere_mesh, yaw_matrix
from declutter.sim3 import Sim3
from declutter.voxels import box_iou, volumetric_iou, voxelize


def shifted(mesh, offset):
    return TriangleMesh(mesh.vertices + np.asarray(offset, float), mesh.triangles)


def test_identical_cubes():
    assert abs(volumetric_iou(box_mesh(), box_mesh(), 64) - 1.0) <= 1 / 64


def test_disjoint_cubes():
    assert volumetric_iou(box_mesh(), shifted(box_mesh(), (3, 0, 0))) == 0.0


def test_half_shift_matches_analytic_third():
    iou = volumetric_iou(box_mesh(), shifted(box_mesh(), (0.5, 0, 0)), 64)
    assert abs(iou - 1 / 3) <= 0.05


def test_low_resolution_rejected():
    with pytest.raises(ValueError):
        volumetric_iou(box_mesh(), box_mesh(), 4)


def test_voxelize_matches_brute_force_inside_test():
    """Parity fill of a rotated box against an analytic point-in-box test."""
    R = yaw_matrix(0.4)
    mesh = box_mesh((1.0, 0.6, 0.8)).transformed(Sim3(1.0, R, np.zeros(3)))
    lo, hi = np.array([-1.0, -0.5, -1.0]), np.array([1.0, 0.5, 1.0])
    n = 32
    occ = voxelize(mesh, lo, hi, n)
    step = (hi - lo) / n
    c = lo + (np.indices((n, n, n)).reshape(3, -1).T + 0.5) * step
    local = c @ R  # rows of R^T applied
    inside = np.all(np.abs(local) <= np.array([0.5, 0.3, 0.4]), axis=1).reshape(n, n, n)
    # only voxels whose centre is within half a voxel of the surface may disagree
    margin = np.min(np.array([0.5, 0.3, 0.4]) - np.abs(local), axis=1).reshape(n, n, n)
    mismatch = occ != inside
    assert np.all(np.abs(margin[mismatch]) < step.max())
    assert mismatch.sum() <= 0.01 * occ.size


def test_voxelized_sphere_volume():
    s = sphere_mesh(1.0, 24, 48)
    lo, hi = s.bounds
    occ = voxelize(s, lo, hi, 64)
    vol = occ.sum() * np.prod((hi - lo) / 64)
    assert abs(vol - 4 / 3 * np.pi) / (4 / 3 * np.pi) < 0.03


@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(0, 6.3), st.floats(0.3, 2))
def test_volumetric_iou_symmetric_and_bounded(dx, dz, yaw, s):
    a = box_mesh((1.0, 0.7, 0.9))
    b = box_mesh((0.8, 0.9, 0.6)).transformed(Sim3(s, yaw_matrix(yaw), np.array([dx, 0.1, dz])))
    i1, i2 = volumetric_iou(a, b, 24), volumetric_iou(b, a, 24)
    assert abs(i1 - i2) < 1e-12
    assert 0.0 <= i1 <= 1.0


def test_box_iou():
    assert box_iou(box_mesh(), box_mesh()) == 1.0
    assert np.isclose(box_iou(box_mesh(), shifted(box_mesh(), (0.5, 0, 0))), 1 / 3)
    assert box_iou(box_mesh(), shifted(box_mesh(), (5, 0, 0))) == 0.0
