import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from pseudolidar.errors import DomainError
from pseudolidar.geometry import (
    Intrinsics, RigidTransform, backproject, cam_to_lidar, depth_from_disparity,
    disparity_from_depth, lidar_to_cam, project,
)

K = Intrinsics(700.0, 700.0, 600.0, 180.0)


def random_transforms(n, seed):
    rng = np.random.default_rng(seed)
    rots = Rotation.random(n, random_state=seed).as_matrix()
    return [RigidTransform(R, rng.uniform(-5, 5, 3)) for R in rots]


def test_backproject_principal_point():
    np.testing.assert_array_equal(backproject([600.0, 180.0, 10.0], K), [0.0, 0.0, 10.0])


def test_backproject_hand_value():
    # X = (1300 - 600) * 7 / 700
    np.testing.assert_allclose(backproject([1300.0, 180.0, 7.0], K), [7.0, 0.0, 7.0], atol=1e-15)


def test_project_hand_value():
    # u = 700 * 3.5 / 7 + 600
    assert project([3.5, 0.0, 7.0], K)[0] == pytest.approx(950.0, abs=1e-12)
    np.testing.assert_array_equal(project([0.0, 0.0, 5.0], K), [600.0, 180.0, 5.0])


@pytest.mark.parametrize("z", [0.0, -1.0])
def test_backproject_invalid_depth(z):
    with pytest.raises(DomainError):
        backproject([10.0, 10.0, z], K)


def test_project_behind_camera():
    with pytest.raises(DomainError):
        project([1.0, 1.0, -2.0], K)


@settings(max_examples=200, deadline=None)
@given(u=st.floats(-500, 2000), v=st.floats(-500, 1000), z=st.floats(0.5, 100))
def test_project_backproject_roundtrip(u, v, z):
    out = project(backproject([u, v, z], K), K)
    assert abs(out[0] - u) <= 1e-9 and abs(out[1] - v) <= 1e-9
    assert abs(out[2] - z) <= 1e-12


def test_cam_to_lidar_translation_only():
    C = RigidTransform(np.eye(3), [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(cam_to_lidar([0.0, 0.0, 0.0], C), [0.0, 0.0, -1.0])


def test_identity_transform():
    p = np.array([1.0, -2.0, 3.0])
    C = RigidTransform.identity()
    np.testing.assert_array_equal(cam_to_lidar(p, C), p)
    np.testing.assert_array_equal(lidar_to_cam(p, C), p)


def test_transforms_match_homogeneous_oracle():
    rng = np.random.default_rng(11)
    for C in random_transforms(1000, 11):
        p = rng.uniform(-50, 50, 3)
        M = C.matrix
        fwd = (M @ np.append(p, 1.0))[:3]
        inv = (np.linalg.inv(M) @ np.append(p, 1.0))[:3]
        np.testing.assert_allclose(lidar_to_cam(p, C), fwd, atol=1e-9, rtol=0)
        np.testing.assert_allclose(cam_to_lidar(p, C), inv, atol=1e-9, rtol=0)


def test_cam_to_lidar_satisfies_forward_equation():
    rng = np.random.default_rng(12)
    pts = rng.uniform(-50, 50, (200, 3))
    for C in random_transforms(20, 12):
        back = lidar_to_cam(cam_to_lidar(pts, C), C)
        np.testing.assert_allclose(back, pts, atol=1e-9, rtol=0)


def test_rigid_transform_preserves_distances():
    rng = np.random.default_rng(13)
    a, b = rng.uniform(-30, 30, (2, 100, 3))
    for C in random_transforms(10, 13):
        d0 = np.linalg.norm(a - b, axis=1)
        d1 = np.linalg.norm(lidar_to_cam(a, C) - lidar_to_cam(b, C), axis=1)
        np.testing.assert_allclose(d1, d0, atol=1e-9, rtol=0)


def test_rigid_transform_rejects_non_rotation():
    with pytest.raises(DomainError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(DomainError):
        RigidTransform(np.eye(3) * 1.01, np.zeros(3))


def test_intrinsics_require_positive_focal():
    with pytest.raises(DomainError):
        Intrinsics(0.0, 700.0, 1.0, 1.0)


def test_depth_from_disparity_hand_value():
    assert depth_from_disparity(7.0, 700.0, 0.54) == pytest.approx(54.0, abs=1e-12)


@pytest.mark.parametrize("d", [0.0, -1.0, -0.0])
def test_disparity_domain_errors(d):
    with pytest.raises(DomainError):
        depth_from_disparity(d, 700.0, 0.54)
    with pytest.raises(DomainError):
        disparity_from_depth(d, 700.0, 0.54)


def test_disparity_depth_involution():
    D = np.linspace(1.0, 80.0, 10_000)
    back = depth_from_disparity(disparity_from_depth(D, 700.0, 0.54), 700.0, 0.54)
    assert np.abs(back - D).max() <= 1e-9
