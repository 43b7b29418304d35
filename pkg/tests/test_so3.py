"""Rotation utilities: conventions pinned against scipy and hand values."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from panoslam.so3 import (
    euler_zyx_to_rot,
    quat_angle_between,
    quat_conj,
    quat_exp,
    quat_left,
    quat_log,
    quat_mul,
    quat_normalize,
    quat_right,
    quat_rotate,
    quat_to_rot,
    rot_exp,
    rot_log,
    rot_to_euler_zyx,
    rot_to_quat,
    rot_z,
    skew,
    wrap_angle,
    yaw_of_rot,
)

rotvecs = st.lists(
    st.floats(min_value=-3.0, max_value=3.0), min_size=3, max_size=3
).map(np.array)


def scipy_quat(q_wxyz):
    # scipy uses scalar-last storage.
    return Rotation.from_quat([q_wxyz[1], q_wxyz[2], q_wxyz[3], q_wxyz[0]])


def test_hamilton_product_ij_equals_k():
    i = np.array([0.0, 1.0, 0.0, 0.0])
    j = np.array([0.0, 0.0, 1.0, 0.0])
    k = np.array([0.0, 0.0, 0.0, 1.0])
    np.testing.assert_allclose(quat_mul(i, j), k, atol=1e-15)
    np.testing.assert_allclose(quat_mul(j, i), -k, atol=1e-15)


def test_quarter_turn_about_z_maps_x_to_y():
    q = quat_exp(np.array([0.0, 0.0, np.pi / 2]))
    np.testing.assert_allclose(quat_rotate(q, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(quat_to_rot(q) @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)


def test_skew_matches_cross_product():
    a = np.array([0.3, -1.2, 2.0])
    b = np.array([-0.7, 0.25, 1.1])
    np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), atol=1e-15)


@settings(max_examples=80, deadline=None)
@given(rv=rotvecs)
def test_exp_matches_scipy(rv):
    q = quat_exp(rv)
    R = rot_exp(rv)
    R_ref = Rotation.from_rotvec(rv).as_matrix()
    np.testing.assert_allclose(R, R_ref, atol=1e-10)
    np.testing.assert_allclose(quat_to_rot(q), R_ref, atol=1e-10)


@settings(max_examples=80, deadline=None)
@given(rv=rotvecs)
def test_log_inverts_exp(rv):
    # Keep the angle inside (0, pi) so the log branch is unambiguous.
    angle = np.linalg.norm(rv)
    if angle > np.pi - 1e-3:
        rv = rv / angle * (np.pi - 1e-3)
    np.testing.assert_allclose(quat_log(quat_exp(rv)), rv, atol=1e-9)
    np.testing.assert_allclose(rot_log(rot_exp(rv)), rv, atol=1e-9)


@settings(max_examples=80, deadline=None)
@given(rv=rotvecs)
def test_rot_quat_round_trip(rv):
    R = rot_exp(rv)
    np.testing.assert_allclose(quat_to_rot(rot_to_quat(R)), R, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(rv1=rotvecs, rv2=rotvecs)
def test_product_matrices(rv1, rv2):
    q, p = quat_exp(rv1), quat_exp(rv2)
    qp = quat_mul(q, p)
    np.testing.assert_allclose(quat_left(q) @ p, qp, atol=1e-12)
    np.testing.assert_allclose(quat_right(p) @ q, qp, atol=1e-12)
    # Composition convention: rotation matrices compose the same way.
    np.testing.assert_allclose(
        quat_to_rot(qp), quat_to_rot(q) @ quat_to_rot(p), atol=1e-12
    )


@settings(max_examples=60, deadline=None)
@given(rv=rotvecs)
def test_conj_is_inverse(rv):
    q = quat_exp(rv)
    np.testing.assert_allclose(
        quat_mul(q, quat_conj(q)), [1.0, 0.0, 0.0, 0.0], atol=1e-12
    )


def test_rotate_matches_scipy():
    rng = np.random.default_rng(11)
    for _ in range(20):
        q = quat_normalize(rng.normal(size=4))
        v = rng.normal(size=3)
        np.testing.assert_allclose(
            quat_rotate(q, v), scipy_quat(q).apply(v), atol=1e-10
        )


def test_euler_zyx_convention():
    # yaw about z, then pitch about y, then roll about x.
    R = euler_zyx_to_rot(0.1, -0.2, 0.3)
    R_ref = Rotation.from_euler("ZYX", [0.3, -0.2, 0.1]).as_matrix()
    np.testing.assert_allclose(R, R_ref, atol=1e-12)
    roll, pitch, yaw = rot_to_euler_zyx(R)
    np.testing.assert_allclose([roll, pitch, yaw], [0.1, -0.2, 0.3], atol=1e-12)


def test_yaw_of_rot():
    R = euler_zyx_to_rot(0.05, -0.1, 1.2)
    assert abs(yaw_of_rot(R) - 1.2) < 1e-9
    np.testing.assert_allclose(rot_z(1.2), euler_zyx_to_rot(0.0, 0.0, 1.2), atol=1e-15)


def test_wrap_angle():
    assert abs(wrap_angle(np.pi + 0.1) - (-np.pi + 0.1)) < 1e-12
    assert abs(wrap_angle(-np.pi - 0.1) - (np.pi - 0.1)) < 1e-12
    assert abs(wrap_angle(0.4) - 0.4) < 1e-15
    np.testing.assert_allclose(
        wrap_angle(np.array([2 * np.pi, -2 * np.pi])), [0.0, 0.0], atol=1e-12
    )


def test_angle_between():
    q1 = quat_exp(np.array([0.0, 0.0, 0.2]))
    q2 = quat_exp(np.array([0.0, 0.0, 0.5]))
    assert abs(quat_angle_between(q1, q2) - 0.3) < 1e-9
    # Sign-flipped quaternion is the same rotation.
    assert quat_angle_between(q1, -q1) < 1e-12
