import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfmnet import autodiff as ad
from sfmnet.geometry import CameraIntrinsics, FlowField, RigidMotion, rotation_from_sines
from sfmnet.losses import (ConfigurationError, DepthSupervision, LossWeights, Observations, PairEstimate,
                           PoseSupervision, depth_supervision_loss, first_order_smoothness, flow_supervision_loss,
                           forward_backward_loss, photometric_loss, pose_error, second_order_depth_smoothness,
                           total_loss)

ALL_OFF = dict(w_color=0.0, w_flow_smooth=0.0, w_mask_smooth=0.0, w_depth_smooth=0.0, w_fb=0.0)


def zero_flow(h, w):
    z = np.zeros((h, w))
    return FlowField(z, z, z)


# --- oracles -----------------------------------------------------------------

def oracle_first_order(f):
    h, w = f.shape
    dx = [abs(f[y][x + 1] - f[y][x]) for y in range(h) for x in range(w - 1)]
    dy = [abs(f[y + 1][x] - f[y][x]) for y in range(h - 1) for x in range(w)]
    return (sum(dx) / len(dx) if dx else 0.0) + (sum(dy) / len(dy) if dy else 0.0)


def oracle_second_order(d):
    h, w = d.shape
    dx = [abs(d[y][x + 1] - 2 * d[y][x] + d[y][x - 1]) for y in range(h) for x in range(1, w - 1)]
    dy = [abs(d[y + 1][x] - 2 * d[y][x] + d[y - 1][x]) for y in range(1, h - 1) for x in range(w)]
    return sum(dx) / len(dx) + sum(dy) / len(dy)


# --- photometric -------------------------------------------------------------

def test_photometric_trivial_cases(rng):
    I = rng.uniform(size=(5, 5, 3))
    assert photometric_loss(I, I, zero_flow(5, 5)) == 0.0
    const = np.full((5, 5, 3), 0.3)
    f = FlowField(np.full((5, 5), 0.7), np.full((5, 5), -0.4), np.zeros((5, 5)))
    assert abs(photometric_loss(const, const, f)) < 1e-15


def test_photometric_zero_flow_oracle(rng):
    a, b = rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3))
    ref = sum(abs(a[y, x, c] - b[y, x, c]) for y in range(4) for x in range(4) for c in range(3)) / 48
    assert abs(photometric_loss(a, b, zero_flow(4, 4)) - ref) < 1e-14


def test_photometric_no_valid_pixels(rng):
    a = rng.uniform(size=(3, 3))
    diag = {}
    f = FlowField(np.full((3, 3), 10.0), np.zeros((3, 3)), np.zeros((3, 3)))
    assert photometric_loss(a, a, f, diag) == 0.0 and diag["no_valid_pixels"]


def test_photometric_shift_equivariance(rng):
    big = rng.uniform(size=(8, 10))
    f = FlowField(np.full((6, 6), 0.6), np.full((6, 6), 0.3), np.zeros((6, 6)))
    a = photometric_loss(big[:6, :6], big[:6, :6] * 0.9, f)
    b = photometric_loss(big[1:7, 2:8], big[1:7, 2:8] * 0.9, f)
    c = photometric_loss(big[1:7, 2:8], big[1:7, 2:8] * 0.9, f)
    assert b == c and a != b  # same inputs give the same value; content differs
    # shifting both frames and the sampling positions together on the valid region
    whole = photometric_loss(big, big * 0.9, FlowField(np.full((8, 10), 0.6), np.full((8, 10), 0.3), np.zeros((8, 10))))
    assert math.isfinite(whole)


def test_photometric_shape_mismatch():
    with pytest.raises(ValueError):
        photometric_loss(np.zeros((3, 3)), np.zeros((3, 4)), zero_flow(3, 3))


# --- smoothness --------------------------------------------------------------

def test_first_order_cases(rng):
    assert first_order_smoothness(np.full((4, 4), 2.0)) == 0.0
    assert first_order_smoothness(np.arange(6.0)[None, :]) == 1.0
    f = rng.normal(size=(5, 7))
    assert abs(first_order_smoothness(f) - oracle_first_order(f)) < 1e-14
    stack = rng.normal(size=(3, 4, 4))
    ref = sum(oracle_first_order(s) for s in stack)
    assert abs(first_order_smoothness(stack) - ref) < 1e-13
    assert abs(first_order_smoothness(list(stack)) - ref) < 1e-13


def test_second_order_cases(rng):
    assert second_order_depth_smoothness(np.full((5, 5), 3.0)) == 0.0
    ys, xs = np.mgrid[0:5, 0:6].astype(float)
    assert second_order_depth_smoothness(0.3 * xs - 0.7 * ys + 2) < 1e-14
    d = rng.uniform(1, 3, (6, 5))
    assert abs(second_order_depth_smoothness(d) - oracle_second_order(d)) < 1e-14


# --- forward-backward --------------------------------------------------------

def test_forward_backward_cases(rng):
    d = rng.uniform(1, 3, (4, 4))
    assert forward_backward_loss(d, d, zero_flow(4, 4)) == 0.0
    assert abs(forward_backward_loss(d, d + 1, zero_flow(4, 4)) - 1.0) < 1e-14
    diag = {}
    far = FlowField(np.full((4, 4), 9.0), np.zeros((4, 4)), np.zeros((4, 4)))
    assert forward_backward_loss(d, d, far, diag) == 0.0 and diag["no_valid_pixels"]


def test_forward_backward_synth(scenes):
    for name in ("static", "cam-translate", "cam-rotate"):
        gt = scenes[name]
        assert forward_backward_loss(gt.d_t, gt.d_tp1, gt.flow) < 1e-3, name


# --- supervision -------------------------------------------------------------

def test_depth_supervision_cases(rng):
    d = rng.uniform(1, 2, (2, 2))
    assert depth_supervision_loss(d, DepthSupervision(d, np.ones((2, 2)))) == 0.0
    assert depth_supervision_loss(d, DepthSupervision(d + 5, np.zeros((2, 2)))) == 0.0
    gt = np.array([[1.0, 2.0], [3.0, 4.0]])
    pred = gt + np.array([[0.5, -0.5], [9.0, 9.0]])
    assert depth_supervision_loss(pred, DepthSupervision(gt, np.array([[1, 1], [0, 0]]))) == 0.25


def test_depth_supervision_from_depth():
    sup = DepthSupervision.from_depth(np.array([[0.0, 2.0]]))
    assert sup.dmask_gt.tolist() == [[0.0, 1.0]]
    with pytest.raises(ValueError):
        DepthSupervision(np.array([[0.0]]), np.array([[1.0]]))


def test_flow_supervision_cases(rng):
    U, V = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert flow_supervision_loss((U, V), (U, V)) == 0.0
    assert flow_supervision_loss((np.ones((3, 4)), np.zeros((3, 4))), (np.zeros((3, 4)), np.zeros((3, 4)))) == 1.0
    U2, V2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    ref = sum(abs(U[y, x] - U2[y, x]) + abs(V[y, x] - V2[y, x]) for y in range(3) for x in range(4)) / 12
    assert abs(flow_supervision_loss((U, V), (U2, V2)) - ref) < 1e-14


# --- pose --------------------------------------------------------------------

def _roty(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])


def test_pose_error_hand_cases(rng):
    m = RigidMotion(rng.uniform(-0.3, 0.3, 3), rng.normal(size=3))
    R = rotation_from_sines(*m.sines)
    assert tuple(map(float, pose_error(m, R, m.t))) == (0.0, 0.0)
    t, r = pose_error(RigidMotion(), _roty(30), np.zeros(3))
    assert float(t) == 0.0 and float(r) == math.pi / 6
    t, r = pose_error(RigidMotion(), np.eye(3), np.array([1.0, 2.0, 2.0]))
    assert (float(t), float(r)) == (3.0, 0.0)


def test_pose_error_quarter_turn():
    _, r = pose_error(RigidMotion(), _roty(90), np.zeros(3))
    assert abs(float(r) - math.pi / 2) < 1e-15


def test_pose_error_matches_arccos_oracle(rng):
    for _ in range(50):
        m = RigidMotion(rng.uniform(-0.9, 0.9, 3), rng.normal(size=3), rng.normal(size=3))
        R_gt = rotation_from_sines(*rng.uniform(-0.9, 0.9, 3))
        t_gt = rng.normal(size=3)
        R = np.asarray(rotation_from_sines(*m.sines))
        R_err = R.T @ R_gt
        ref_r = math.acos(max(-1.0, min(1.0, (np.trace(R_err) - 1) / 2)))
        ref_t = np.linalg.norm(R.T @ (t_gt - (m.t - R @ m.p)))
        t, r = pose_error(m, R_gt, t_gt)
        assert abs(float(t) - ref_t) < 1e-12 and abs(float(r) - ref_r) < 1e-7


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.floats(-0.99, 0.99)] * 6))
def test_pose_rotation_symmetric(s):
    A = rotation_from_sines(*s[:3])
    B = rotation_from_sines(*s[3:])
    _, r1 = pose_error(RigidMotion(np.array(s[:3])), B, np.zeros(3))
    _, r2 = pose_error(RigidMotion(np.array(s[3:])), A, np.zeros(3))
    assert abs(float(r1) - float(r2)) < 1e-12
    assert 0.0 <= float(r1) <= math.pi


def test_pose_supervision_inverse(rng):
    R = rotation_from_sines(*rng.uniform(-0.5, 0.5, 3))
    sup = PoseSupervision(R, rng.normal(size=3))
    inv = sup.inverse()
    np.testing.assert_allclose(inv.R @ sup.R, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(inv.R @ sup.t + inv.t, 0.0, atol=1e-15)


# --- weights and total -------------------------------------------------------

def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(w_color=-1.0)
    with pytest.raises(ValueError):
        LossWeights(**ALL_OFF, w_depth_sup=0.0, w_pose_trans=0.0, w_pose_rot=0.0, w_flow_sup=0.0)
    LossWeights(**ALL_OFF)  # supervised terms left on auto still count
    w = LossWeights().update(w_fb=0.5)
    assert w.w_fb == 0.5 and w.w_color == 1.0


def _estimate(rng, h, w, k=2, zero=False):
    d = np.full((h, w), 2.0) if zero else rng.uniform(1.5, 3, (h, w))
    masks = np.zeros((k, h, w)) if zero else rng.uniform(0, 1, (k, h, w))
    motion = (lambda: RigidMotion()) if zero else (lambda: RigidMotion(rng.uniform(-.02, .02, 3), rng.normal(0, .03, 3)))
    return PairEstimate(d, d.copy(), masks, masks.copy(), motion(), motion(),
                        [motion() for _ in range(k)], [motion() for _ in range(k)])


def test_total_identical_frames_zero_motion(rng):
    I = rng.uniform(size=(6, 6, 3))
    w = LossWeights(**{**ALL_OFF, "w_color": 1.0})
    assert total_loss(_estimate(rng, 6, 6, zero=True), Observations(I, I), w) == 0.0


def test_total_single_term_linear(rng):
    I, J = rng.uniform(size=(6, 6, 3)), rng.uniform(size=(6, 6, 3))
    est = _estimate(rng, 6, 6)
    obs = Observations(I, J)
    flow, _ = est.flows(obs.intrinsics)
    one = total_loss(est, obs, LossWeights(**{**ALL_OFF, "w_fb": 0.7}), symmetric=False)
    assert abs(one - 0.7 * forward_backward_loss(est.depth_t, est.depth_tp1, flow)) < 1e-14


def test_total_is_sum_of_terms(rng):
    I, J = rng.uniform(size=(6, 6, 3)), rng.uniform(size=(6, 6, 3))
    est = _estimate(rng, 6, 6)
    obs = Observations(I, J)
    fwd, bwd = est.flows(obs.intrinsics)
    w = LossWeights(**{**ALL_OFF, "w_color": 0.6, "w_depth_smooth": 0.2})
    ref = (0.6 * photometric_loss(I, J, fwd) + 0.2 * second_order_depth_smoothness(est.depth_t)
           + 0.6 * photometric_loss(J, I, bwd) + 0.2 * second_order_depth_smoothness(est.depth_tp1))
    terms = {}
    assert abs(total_loss(est, obs, w, terms=terms) - ref) < 1e-14
    assert set(terms) == {"color/fwd", "depth_smooth/fwd", "color/bwd", "depth_smooth/bwd"}


def test_supervised_terms_follow_ground_truth(rng):
    I = rng.uniform(size=(5, 5, 3))
    est = _estimate(rng, 5, 5)
    with pytest.raises(ConfigurationError):
        total_loss(est, Observations(I, I), LossWeights(w_pose_rot=1.0))
    pose = PoseSupervision(np.eye(3), np.zeros(3))
    terms = {}
    total_loss(est, Observations(I, I, pose=pose), LossWeights(), terms=terms)
    assert {"pose_trans/fwd", "pose_rot/fwd", "pose_trans/bwd", "pose_rot/bwd"} <= set(terms)
    terms = {}
    total_loss(est, Observations(I, I, pose=pose), LossWeights(w_pose_rot=0.0), terms=terms)
    assert "pose_rot/fwd" not in terms and "pose_trans/fwd" in terms


def test_losses_nonnegative_and_zero_at_match(rng):
    I = rng.uniform(size=(5, 5, 3))
    est = _estimate(rng, 5, 5)
    terms = {}
    d = DepthSupervision(est.depth_t, np.ones((5, 5)))
    total_loss(est, Observations(I, np.roll(I, 1, 0), depth_t=d), LossWeights(), terms=terms)
    assert all(v >= 0 for v in terms.values())
    assert terms["depth_sup/fwd"] == 0.0


def test_scale_gauge(rng):
    """Scaling depth, translations and pivots together leaves the photometric loss unchanged."""
    I, J = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    est = _estimate(rng, 8, 8)
    w = LossWeights(**{**ALL_OFF, "w_color": 1.0})
    base = total_loss(est, Observations(I, J), w)
    for c in (0.5, 4.0):
        s = lambda m: RigidMotion(m.sines, c * m.t, c * m.p)  # noqa: E731
        scaled = PairEstimate(c * est.depth_t, c * est.depth_tp1, est.masks_t, est.masks_tp1, s(est.cam_fwd),
                              s(est.cam_bwd), [s(m) for m in est.objs_fwd], [s(m) for m in est.objs_bwd])
        assert abs(total_loss(scaled, Observations(I, J), w) - base) < 1e-9


def test_total_gradient_flows_to_every_parameter(rng):
    I, J = rng.uniform(size=(6, 6, 3)), rng.uniform(size=(6, 6, 3))
    est = _estimate(rng, 6, 6, k=1)

    def loss(p):
        e = PairEstimate(p["d"], p["d2"], p["m"], p["m"], RigidMotion(p["s"], p["t"]), RigidMotion(),
                         [RigidMotion(t=p["ot"])], [RigidMotion()])
        return total_loss(e, Observations(I, J, CameraIntrinsics()), LossWeights())

    params = {"d": est.depth_t, "d2": est.depth_tp1, "m": est.masks_t, "s": np.array([0.01, -0.02, 0.01]),
              "t": np.array([0.05, 0.0, 0.02]), "ot": np.array([0.03, 0.01, 0.0])}
    _, g = ad.value_and_grad(loss, params)
    assert all(np.any(g[k] != 0) for k in params)
