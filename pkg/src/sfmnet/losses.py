"""Training objectives for a frame pair and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .geometry import CameraIntrinsics, FlowField, RigidMotion, compute_flow
from .warping import bilinear_sample, inverse_warp, sample_grid


class ConfigurationError(ValueError):
    pass


@dataclass
class LossWeights:
    """Per-term weights.

    Supervised weights default to ``None``: the term is used with weight 1 when
    its ground truth is supplied and skipped otherwise.  Setting one explicitly
    to a positive value without ground truth is a configuration error.
    """

    w_color: float = 1.0
    w_flow_smooth: float = 0.1
    w_mask_smooth: float = 0.1
    w_depth_smooth: float = 0.1
    w_fb: float = 0.1
    w_depth_sup: Optional[float] = None
    w_pose_trans: Optional[float] = None
    w_pose_rot: Optional[float] = None
    w_flow_sup: Optional[float] = None

    def __post_init__(self):
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        for name, v in vals.items():
            if v is not None and not v >= 0:
                raise ConfigurationError(f"{name} must be nonnegative, got {v}")
        if not any(v is None or v > 0 for v in vals.values()):
            raise ConfigurationError("at least one loss weight must be positive")

    def update(self, **overrides) -> "LossWeights":
        known = {f.name for f in fields(self)}
        for k in overrides:
            if k not in known:
                raise ConfigurationError(f"unknown loss weight '{k}'")
        return LossWeights(**{**{f.name: getattr(self, f.name) for f in fields(self)}, **overrides})


@dataclass
class DepthSupervision:
    d_gt: np.ndarray
    dmask_gt: np.ndarray

    def __post_init__(self):
        self.d_gt = np.asarray(self.d_gt, dtype=np.float64)
        self.dmask_gt = np.asarray(self.dmask_gt, dtype=np.float64)
        if self.d_gt.shape != self.dmask_gt.shape:
            raise ValueError("depth and depth mask shapes differ")
        if np.any(self.d_gt[self.dmask_gt > 0] <= 0):
            raise ValueError("ground-truth depth must be positive where the mask is set")

    @classmethod
    def from_depth(cls, d_gt) -> "DepthSupervision":
        """Missing depth is stored as 0 and masked out."""
        d_gt = np.asarray(d_gt, dtype=np.float64)
        return cls(d_gt, (d_gt > 0).astype(np.float64))


@dataclass
class PoseSupervision:
    R: np.ndarray
    t: np.ndarray

    def inverse(self) -> "PoseSupervision":
        R = np.asarray(self.R, dtype=np.float64)
        return PoseSupervision(R.T, -R.T @ np.asarray(self.t, dtype=np.float64))


@dataclass
class PairEstimate:
    """Constrained quantities for a frame pair in both directions."""

    depth_t: object
    depth_tp1: object
    masks_t: object = None
    masks_tp1: object = None
    cam_fwd: RigidMotion = field(default_factory=RigidMotion)
    cam_bwd: RigidMotion = field(default_factory=RigidMotion)
    objs_fwd: Sequence[RigidMotion] = ()
    objs_bwd: Sequence[RigidMotion] = ()

    def flows(self, K: CameraIntrinsics, stats: dict | None = None) -> tuple[FlowField, FlowField]:
        fwd = compute_flow(self.depth_t, self.masks_t, self.objs_fwd, self.cam_fwd, K, stats=stats)
        bwd = compute_flow(self.depth_tp1, self.masks_tp1, self.objs_bwd, self.cam_bwd, K, stats=stats)
        return fwd, bwd


@dataclass
class Observations:
    I_t: np.ndarray
    I_tp1: np.ndarray
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    depth_t: Optional[DepthSupervision] = None
    depth_tp1: Optional[DepthSupervision] = None
    pose: Optional[PoseSupervision] = None
    flow: Optional[tuple] = None
    flow_bwd: Optional[tuple] = None


def _flag(diagnostics, key):
    if diagnostics is not None:
        diagnostics[key] = True


def _valid_mean(residual, valid, diagnostics=None, key="no_valid_pixels"):
    valid = np.asarray(valid, dtype=np.float64)
    count = valid.sum()
    if count == 0:
        _flag(diagnostics, key)
        return 0.0
    nchan = 1
    rshape = np.shape(ad.value_of(residual))
    if len(rshape) == 3:
        nchan = rshape[2]
        valid = valid[..., None]
    return ad.sum_(ad.abs_(residual) * valid) / (count * nchan)


def photometric_loss(I_t, I_tp1, flow, diagnostics: dict | None = None):
    """Mean |I_t(x, y) - I_tp1(x + U, y + V)| over valid pixels and channels."""
    if np.shape(I_t) != np.shape(I_tp1):
        raise ValueError("frame shapes differ")
    warped, valid = inverse_warp(I_tp1, flow)
    return _valid_mean(I_t - warped, valid, diagnostics)


def _components(field_):
    if isinstance(field_, (list, tuple)):
        return list(field_)
    shape = np.shape(ad.value_of(field_))
    if len(shape) == 3:
        return [field_[i] for i in range(shape[0])]
    return [field_]


def first_order_smoothness(field_):
    """Mean L1 of horizontal plus vertical forward differences, summed over components."""
    total = 0.0
    for f in _components(field_):
        h, w = np.shape(ad.value_of(f))
        if w > 1:
            total = total + ad.mean(ad.abs_(f[:, 1:] - f[:, :-1]))
        if h > 1:
            total = total + ad.mean(ad.abs_(f[1:, :] - f[:-1, :]))
    return total


def second_order_depth_smoothness(d):
    """Mean L1 of second differences along each axis over interior pixels."""
    h, w = np.shape(ad.value_of(d))
    total = 0.0
    if w > 2:
        total = total + ad.mean(ad.abs_(d[:, 2:] - 2.0 * d[:, 1:-1] + d[:, :-2]))
    if h > 2:
        total = total + ad.mean(ad.abs_(d[2:, :] - 2.0 * d[1:-1, :] + d[:-2, :]))
    return total


def forward_backward_loss(d_t, d_tp1, flow, diagnostics: dict | None = None):
    """Mean |(d_t + W) - d_tp1(x + U, y + V)| over valid pixels."""
    x, y = sample_grid(flow[0], flow[1])
    sampled, valid = bilinear_sample(d_tp1, x, y)
    return _valid_mean(d_t + flow[2] - sampled, valid, diagnostics)


def depth_supervision_loss(d, sup: DepthSupervision):
    """Masked L1 depth error normalized by the full pixel count."""
    if np.shape(ad.value_of(d)) != sup.d_gt.shape:
        raise ValueError("depth and ground truth shapes differ")
    return ad.sum_(ad.abs_(d - sup.d_gt) * sup.dmask_gt) / float(sup.d_gt.size)


def _norm_vjp(g, y, v):
    return (np.zeros_like(v) if y == 0 else g * v / y,)


_norm = ad.make_primitive("norm", ad._noting(lambda v: np.sqrt(np.sum(np.square(v))), lambda v: np.all(v == 0)),
                          _norm_vjp)


def pose_error(pred: RigidMotion, gt_R, gt_t):
    """(translation error norm, rotation angle) of pred^-1 composed with gt.

    The angle is arccos((trace(R_err) - 1) / 2) evaluated as
    atan2(sin, cos) with sin taken from the antisymmetric part of R_err; the
    two agree on rotation matrices, and this one is exact at the identity.
    The predicted translation is the effective one, ``t - R p``, which is
    ``t`` whenever the pivot is zero.
    """
    gt_R = np.asarray(gt_R, dtype=np.float64)
    gt_t = np.asarray(gt_t, dtype=np.float64)
    R = pred.rotation()
    Rt = ad.transpose(R)
    t_eff = pred.t - ad.matmul(R, pred.p)
    t_err = ad.matmul(Rt, gt_t - t_eff)
    R_err = ad.matmul(Rt, gt_R)
    # (trace - 1) / 2 written as 1 - sum(1 - R_ii) / 2: each 1 - R_ii is exact
    # near the identity, where forming trace - 1 would round
    diag = ad.sum_(R * gt_R, axis=0)
    cos_angle = ad.clip(1.0 - 0.5 * ad.sum_(1.0 - diag), -1.0, 1.0)
    axis = ad.stack([R_err[2, 1] - R_err[1, 2], R_err[0, 2] - R_err[2, 0], R_err[1, 0] - R_err[0, 1]])
    sin_angle = 0.5 * _norm(axis)
    return _norm(t_err), ad.atan2(sin_angle, cos_angle)


def flow_supervision_loss(flow, gt_flow):
    """Mean of |U - U_gt| + |V - V_gt|."""
    U_gt, V_gt = np.asarray(gt_flow[0], dtype=np.float64), np.asarray(gt_flow[1], dtype=np.float64)
    if np.shape(ad.value_of(flow[0])) != U_gt.shape:
        raise ValueError("flow and ground-truth shapes differ")
    return ad.mean(ad.abs_(flow[0] - U_gt) + ad.abs_(flow[1] - V_gt))


def _sup_weight(weights: LossWeights, name: str, available: bool) -> float:
    w = getattr(weights, name)
    if w is None:
        return 1.0 if available else 0.0
    if w > 0 and not available:
        raise ConfigurationError(f"{name} requested but the matching ground truth was not supplied")
    return w


def total_loss(state: PairEstimate, obs: Observations, weights: LossWeights, symmetric: bool = True,
               terms: dict | None = None, diagnostics: dict | None = None):
    """Weighted sum of all enabled terms over the forward (and inverted) pair.

    ``terms`` receives the unweighted value of every term evaluated, keyed
    ``"<term>/<direction>"``.
    """
    K = obs.intrinsics
    w_depth = _sup_weight(weights, "w_depth_sup", obs.depth_t is not None or obs.depth_tp1 is not None)
    w_ptrans = _sup_weight(weights, "w_pose_trans", obs.pose is not None)
    w_prot = _sup_weight(weights, "w_pose_rot", obs.pose is not None)
    w_flow = _sup_weight(weights, "w_flow_sup", obs.flow is not None or obs.flow_bwd is not None)

    directions = [("fwd", obs.I_t, obs.I_tp1, state.depth_t, state.depth_tp1, state.masks_t,
                   state.objs_fwd, state.cam_fwd, obs.depth_t, obs.pose, obs.flow)]
    if symmetric:
        directions.append(("bwd", obs.I_tp1, obs.I_t, state.depth_tp1, state.depth_t, state.masks_tp1,
                           state.objs_bwd, state.cam_bwd, obs.depth_tp1,
                           obs.pose.inverse() if obs.pose is not None else None, obs.flow_bwd))

    total = 0.0

    def add(name, tag, weight, fn):
        nonlocal total
        if weight <= 0:
            return
        value = fn()
        if terms is not None:
            terms[f"{name}/{tag}"] = float(np.asarray(ad.value_of(value)))
        total = total + weight * value

    for tag, Ia, Ib, da, db, masks, objs, cam, dsup, pose, gflow in directions:
        flow = compute_flow(da, masks, objs, cam, K, stats=diagnostics)
        add("color", tag, weights.w_color, lambda: photometric_loss(Ia, Ib, flow, diagnostics))
        add("flow_smooth", tag, weights.w_flow_smooth, lambda: first_order_smoothness([flow.U, flow.V]))
        if masks is not None and len(objs) > 0:
            add("mask_smooth", tag, weights.w_mask_smooth, lambda: first_order_smoothness(masks))
        add("depth_smooth", tag, weights.w_depth_smooth, lambda: second_order_depth_smoothness(da))
        add("fb", tag, weights.w_fb, lambda: forward_backward_loss(da, db, flow, diagnostics))
        if dsup is not None:
            add("depth_sup", tag, w_depth, lambda: depth_supervision_loss(da, dsup))
        if pose is not None:
            errs = pose_error(cam, pose.R, pose.t)
            add("pose_trans", tag, w_ptrans, lambda: errs[0])
            add("pose_rot", tag, w_prot, lambda: errs[1])
        if gflow is not None:
            add("flow_sup", tag, w_flow, lambda: flow_supervision_loss(flow, gflow))
    return total
