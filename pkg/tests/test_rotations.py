import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.core import numerics as nx
from app.core import rotations as rot
from app.core.errors import DegenerateRotation


def test_axis_angle_round_trip(rng):
    v = Rotation.random(50, random_state=3).as_rotvec()
    np.testing.assert_allclose(rot.matrix_to_axis_angle(rot.axis_angle_to_matrix(v)), v, atol=1e-9)


def test_rot6d_round_trip(rng):
    R = Rotation.random(50, random_state=4).as_matrix()
    np.testing.assert_allclose(rot.rot6d_to_matrix(rot.matrix_to_rot6d(R)), R, atol=1e-12)


def test_rot6d_orthonormalizes_arbitrary_input(rng):
    R = rot.rot6d_to_matrix(rng.standard_normal((20, 6)))
    np.testing.assert_allclose(np.swapaxes(R, -1, -2) @ R, np.broadcast_to(np.eye(3), R.shape), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_rot6d_degenerate_columns():
    with pytest.raises(DegenerateRotation):
        rot.rot6d_to_matrix(np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    with pytest.raises(DegenerateRotation):
        rot.rot6d_to_matrix(np.array([1.0, 0.0, 0.0, 2.0, 0.0, 0.0]))


def test_differentiable_rot6d_matches_numpy(rng):
    r = rng.standard_normal((5, 6))
    np.testing.assert_allclose(rot.rot6d_to_matrix_t(nx.Tensor(r)).data, rot.rot6d_to_matrix(r), atol=1e-10)


def test_differentiable_rot6d_gradient(gradcheck):
    rng = np.random.default_rng(11)
    w = rng.standard_normal((3, 3, 3))
    for _ in range(100):
        gradcheck(lambda r: (rot.rot6d_to_matrix_t(r) * w).sum(), rng.standard_normal((3, 6)))


def test_yaw_and_heading_agree():
    for theta in np.linspace(-3.0, 3.0, 13):
        assert rot.heading_of(rot.yaw_matrix(theta)) == pytest.approx(theta, abs=1e-12)


def test_rotate_xz_matches_yaw_matrix(rng):
    xz = rng.standard_normal((10, 2))
    theta = 0.7
    full = np.stack([xz[:, 0], np.zeros(10), xz[:, 1]], axis=-1) @ rot.yaw_matrix(theta).T
    np.testing.assert_allclose(rot.rotate_xz(xz, theta), full[:, [0, 2]], atol=1e-12)


def test_wrap_angle():
    assert rot.wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert rot.wrap_angle(-0.5) == pytest.approx(-0.5)


def test_slerp_endpoints(rng):
    a = Rotation.random(4, random_state=5).as_rotvec()
    b = Rotation.random(4, random_state=6).as_rotvec()
    np.testing.assert_allclose(rot.axis_angle_to_matrix(rot.slerp_axis_angle(a, b, 0.0)), rot.axis_angle_to_matrix(a), atol=1e-9)
    np.testing.assert_allclose(rot.axis_angle_to_matrix(rot.slerp_axis_angle(a, b, 1.0)), rot.axis_angle_to_matrix(b), atol=1e-9)


def test_clamp_norm():
    v = np.array([[3.0, 4.0, 0.0], [0.1, 0.0, 0.0]])
    out = rot.clamp_norm(v, 1.0)
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), [1.0, 0.1])
