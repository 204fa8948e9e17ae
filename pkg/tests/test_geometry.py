import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfmnet.geometry import (CameraIntrinsics, RigidMotion, apply_camera_motion, apply_object_motions, backproject,
                             compute_flow, project, rotation_from_sines)


# --- scalar oracle -----------------------------------------------------------

def _matvec(M, v):
    return [sum(M[i][j] * v[j] for j in range(3)) for i in range(3)]


def _matmul(A, B):
    return [[sum(A[i][k] * B[k][j] for k in range(3)) for j in range(3)] for i in range(3)]


def oracle_rotation(sa, sb, sg):
    a, b, g = math.asin(sa), math.asin(sb), math.asin(sg)
    rx = [[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]]
    ry = [[math.cos(b), 0, math.sin(b)], [0, 1, 0], [-math.sin(b), 0, math.cos(b)]]
    rz = [[math.cos(g), -math.sin(g), 0], [math.sin(g), math.cos(g), 0], [0, 0, 1]]
    return _matmul(_matmul(rx, ry), rz)


def oracle_rigid(m, X):
    R = oracle_rotation(*m.sines)
    q = _matvec(R, [X[i] - m.p[i] for i in range(3)])
    return [q[i] + m.t[i] for i in range(3)]


def oracle_flow_pixel(x, y, d, masks, objs, cam, K, w, h):
    """Flow at one pixel, written out from the model equations."""
    xn, yn = (x + 0.5) / w, (y + 0.5) / h
    X = [d / K.f * (xn - K.cx), d / K.f * (yn - K.cy), d]
    Xp = list(X)
    for k, m in enumerate(objs):
        moved = oracle_rigid(m, X)
        for i in range(3):
            Xp[i] += masks[k][y][x] * (moved[i] - X[i])
    X2 = oracle_rigid(cam, Xp)
    z = max(X2[2], 1e-3)
    return ((K.f * X2[0] / z + K.cx - xn) * w, (K.f * X2[1] / z + K.cy - yn) * h, X2[2] - d)


def random_motion(rng, scale=0.2):
    return RigidMotion(rng.uniform(-0.3, 0.3, 3), rng.normal(0, scale, 3), rng.normal(0, scale, 3))


# --- backproject / project ---------------------------------------------------

def test_backproject_hand_cases():
    K = CameraIntrinsics()
    # 4x4 grid: pixel (1.5, 1.5) is not a centre, so use w=2: centre of column 0 is x/w = 0.25
    P = backproject(np.full((1, 2), 2.0), K, 2, 1)
    # x/w = 0.25 and 0.75, y/h = 0.5
    np.testing.assert_allclose(P[:, 0, 1], [0.5, 0.0, 2.0])
    P = backproject(np.full((1, 2), 1.0), K, 2, 1)
    np.testing.assert_allclose(P[:, 0, 1], [0.25, 0.0, 1.0], atol=1e-15)
    # principal ray: odd-sized image, centre pixel
    P = backproject(np.full((3, 3), 2.0), K, 3, 3)
    np.testing.assert_allclose(P[:, 1, 1], [0.0, 0.0, 2.0], atol=1e-15)


def test_backproject_matches_scalar_oracle(rng):
    h, w = 5, 7
    d = rng.uniform(0.5, 5, (h, w))
    K = CameraIntrinsics(rng.uniform(0.5, 2), rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7))
    P = backproject(d, K, w, h)
    for y in range(h):
        for x in range(w):
            ref = [d[y, x] / K.f * ((x + 0.5) / w - K.cx), d[y, x] / K.f * ((y + 0.5) / h - K.cy), d[y, x]]
            assert np.max(np.abs(P[:, y, x] - ref)) < 1e-12


def test_backproject_shape_mismatch():
    with pytest.raises(ValueError):
        backproject(np.ones((3, 4)), CameraIntrinsics(), 3, 3)


def test_project_hand_cases():
    K = CameraIntrinsics()
    xn, yn = project(np.array([0.0, 0.0, 5.0]).reshape(3, 1, 1), K)
    assert (float(xn[0, 0]), float(yn[0, 0])) == (0.5, 0.5)
    xn, yn = project(np.array([0.2, 0.0, 2.0]).reshape(3, 1, 1), K)
    assert abs(float(xn[0, 0]) - 0.6) < 1e-15 and float(yn[0, 0]) == 0.5


def test_project_clamps_small_depth():
    stats = {}
    P = np.array([[0.1, 0.1], [0.0, 0.0], [-1.0, 1.0]]).reshape(3, 1, 2)
    xn, _ = project(P, CameraIntrinsics(), stats)
    assert stats["clamped"] == 1
    assert np.isfinite(xn).all()
    assert abs(xn[0, 0] - (0.1 / 1e-3 + 0.5)) < 1e-9


def test_round_trip(rng):
    for _ in range(20):
        h, w = rng.integers(1, 12, 2)
        d = rng.uniform(0.01, 50, (h, w))
        K = CameraIntrinsics(rng.uniform(0.2, 3), rng.uniform(0, 1), rng.uniform(0, 1))
        xn, yn = project(backproject(d, K, w, h), K)
        gx, gy = np.meshgrid((np.arange(w) + 0.5) / w, (np.arange(h) + 0.5) / h)
        assert np.max(np.abs(xn - gx)) < 1e-12 and np.max(np.abs(yn - gy)) < 1e-12


def test_intrinsics_validation_and_pixel_helper():
    with pytest.raises(ValueError):
        CameraIntrinsics(f=0.0)
    K = CameraIntrinsics.from_pixels(320.0, 640, 300.0, 250.0, 480)
    assert (K.f, K.cx) == (0.5, 300.0 / 640) and K.cy == 250.0 / 480


# --- rotations ---------------------------------------------------------------

def test_rotation_hand_cases():
    np.testing.assert_array_equal(rotation_from_sines(0.0, 0.0, 0.0), np.eye(3))
    R = rotation_from_sines(1.0, 0.0, 0.0)
    np.testing.assert_allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-15)


def test_rotation_domain_error():
    with pytest.raises(ValueError):
        rotation_from_sines(1.01, 0.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.floats(-1, 1)] * 3))
def test_rotation_orthonormal(s):
    R = rotation_from_sines(*s)
    assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-12
    assert abs(np.linalg.det(R) - 1) < 1e-12
    assert np.max(np.abs(R - np.array(oracle_rotation(*s)))) < 1e-12


# --- motions -----------------------------------------------------------------

def test_zero_masks_are_identity(rng):
    P = rng.normal(size=(3, 4, 5))
    masks = np.zeros((2, 4, 5))
    out = apply_object_motions(P, masks, [random_motion(rng), random_motion(rng)])
    assert np.array_equal(out, P)


def test_object_translations_compose_additively(rng):
    P = rng.normal(size=(3, 3, 3))
    ones = np.ones((3, 3))
    m1 = RigidMotion(t=np.array([1.0, 0, 0]))
    out = apply_object_motions(P, ones[None], [m1])
    np.testing.assert_allclose(out - P, np.broadcast_to(np.array([1.0, 0, 0])[:, None, None], P.shape), atol=1e-15)
    m2 = RigidMotion(t=np.array([0, 1.0, 0]))
    out = apply_object_motions(P, np.stack([ones, ones]), [m1, m2])
    np.testing.assert_allclose(out - P, np.broadcast_to(np.array([1.0, 1, 0])[:, None, None], P.shape), atol=1e-15)


def test_object_motion_shape_mismatch(rng):
    with pytest.raises(ValueError):
        apply_object_motions(rng.normal(size=(3, 2, 2)), np.ones((2, 2, 2)), [RigidMotion()])
    with pytest.raises(ValueError):
        apply_object_motions(rng.normal(size=(3, 2, 2)), np.ones((1, 3, 2)), [RigidMotion()])


def test_camera_motion_cases(rng):
    P = rng.normal(size=(3, 4, 4))
    assert np.array_equal(apply_camera_motion(P, RigidMotion()), P)
    out = apply_camera_motion(P, RigidMotion(t=np.array([0, 0, 1.0])))
    np.testing.assert_allclose(out[2] - P[2], 1.0)
    np.testing.assert_array_equal(out[:2], P[:2])
    m = random_motion(rng)
    out = apply_camera_motion(P, m)
    for y in range(4):
        for x in range(4):
            assert np.max(np.abs(out[:, y, x] - oracle_rigid(m, P[:, y, x]))) < 1e-12


# --- flow --------------------------------------------------------------------

def test_static_flow_is_zero():
    d = np.full((4, 6), 3.0)
    f = compute_flow(d, np.ones((2, 4, 6)) * 0.0, [RigidMotion(), RigidMotion()], RigidMotion(), CameraIntrinsics())
    assert not np.any(f.U) and not np.any(f.V) and not np.any(f.W)


def test_flat_scene_translation_hand_case():
    w, h = 8, 6
    f = compute_flow(np.full((h, w), 2.0), None, [], RigidMotion(t=np.array([0.2, 0, 0])), CameraIntrinsics())
    np.testing.assert_allclose(f.U, 0.1 * w, atol=1e-12)
    np.testing.assert_allclose(f.V, 0.0, atol=1e-12)
    np.testing.assert_allclose(f.W, 0.0, atol=1e-12)


def test_flow_matches_scalar_oracle(rng):
    for _ in range(5):
        h, w, k = 4, 5, 2
        d = rng.uniform(1, 4, (h, w))
        masks = rng.uniform(0, 1, (k, h, w))
        objs = [random_motion(rng, 0.1) for _ in range(k)]
        cam = random_motion(rng, 0.1)
        K = CameraIntrinsics(rng.uniform(0.7, 1.5), rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6))
        f = compute_flow(d, masks, objs, cam, K)
        for y in range(h):
            for x in range(w):
                ref = oracle_flow_pixel(x, y, d[y, x], masks, objs, cam, K, w, h)
                got = (f.U[y, x], f.V[y, x], f.W[y, x])
                assert max(abs(a - b) for a, b in zip(got, ref)) < 1e-9


def test_flow_scale_equivariance(rng):
    h, w, k = 6, 6, 2
    d = rng.uniform(1, 4, (h, w))
    masks = rng.uniform(0, 1, (k, h, w))
    objs = [random_motion(rng, 0.1) for _ in range(k)]
    cam = random_motion(rng, 0.1)
    K = CameraIntrinsics()
    base = compute_flow(d, masks, objs, cam, K)
    for c in (0.1, 3.0):
        scale = lambda m: RigidMotion(m.sines, c * m.t, c * m.p)  # noqa: E731
        f = compute_flow(c * d, masks, [scale(m) for m in objs], scale(cam), K)
        assert np.max(np.abs(f.U - base.U)) < 1e-9 and np.max(np.abs(f.V - base.V)) < 1e-9
        assert np.max(np.abs(f.W - c * base.W)) < 1e-9


def test_motion_dict_round_trip(rng):
    m = random_motion(rng)
    m2 = RigidMotion.from_dict(m.as_dict())
    for a in ("sines", "t", "p"):
        assert np.array_equal(getattr(m, a), getattr(m2, a))
