import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from egorig.rotations import (
    axis_angle_jacobian,
    axis_angle_to_matrix,
    hat,
    matrix_to_quat,
    quat_multiply,
    quat_to_matrix,
    rotation_about_axis,
)

unit_float = st.floats(-1.0, 1.0, allow_nan=False)


def test_zero_angle_is_exact_identity():
    assert np.array_equal(axis_angle_to_matrix(np.zeros(3)), np.eye(3))
    assert np.array_equal(rotation_about_axis(np.array([0.0, 0.0, 1.0]), 0.0), np.eye(3))


def test_known_rotation():
    R = axis_angle_to_matrix(np.array([0.0, 0.0, np.pi / 2]))
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


@given(st.lists(unit_float, min_size=3, max_size=3))
@settings(max_examples=30, deadline=None)
def test_rotation_is_orthonormal(a):
    R = axis_angle_to_matrix(np.asarray(a))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) > 0


def test_axis_angle_jacobian_matches_fd():
    rng = np.random.default_rng(1)
    for a in [rng.normal(0, 0.7, 3), np.zeros(3), np.array([1e-5, -2e-5, 5e-6])]:
        J = axis_angle_jacobian(a)
        eps = 1e-7
        for i in range(3):
            da = np.zeros(3)
            da[i] = eps
            fd = (axis_angle_to_matrix(a + da) - axis_angle_to_matrix(a - da)) / (2 * eps)
            np.testing.assert_allclose(J[i], fd, atol=1e-6)


def test_quat_matrix_roundtrip():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(20, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    back = matrix_to_quat(quat_to_matrix(q))
    np.testing.assert_allclose(back, q, atol=1e-12)


def test_quat_multiply_matches_matrix_product():
    rng = np.random.default_rng(3)
    q1, q2 = rng.normal(size=(2, 4))
    q1 /= np.linalg.norm(q1)
    q2 /= np.linalg.norm(q2)
    np.testing.assert_allclose(
        quat_to_matrix(quat_multiply(q1, q2)), quat_to_matrix(q1) @ quat_to_matrix(q2), atol=1e-12
    )


def test_hat_cross_product():
    a = np.array([1.0, -2.0, 3.0])
    b = np.array([0.5, 4.0, -1.0])
    np.testing.assert_allclose(hat(a) @ b, np.cross(a, b))
