"""Forward geometric model: depth -> point cloud -> object motions -> camera
motion -> reprojection -> flow.

Every function works on plain numpy arrays and on autodiff tensors alike.
Grids are indexed ``[row, col]``; pixel ``(x, y)`` has its centre at
normalized image coordinates ``((x + 0.5) / w, (y + 0.5) / h)``.  A point
cloud is a ``(3, h, w)`` array holding X, Y, Z.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad

Z_MIN = 1e-3


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float = 1.0
    cx: float = 0.5
    cy: float = 0.5

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")

    @classmethod
    def from_pixels(cls, f_pixels: float, width: int, cx_pixels: float | None = None,
                    cy_pixels: float | None = None, height: int | None = None) -> "CameraIntrinsics":
        """Convert a pixel-unit focal length / principal point to normalized units."""
        height = height or width
        cx = 0.5 if cx_pixels is None else cx_pixels / width
        cy = 0.5 if cy_pixels is None else cy_pixels / height
        return cls(f=f_pixels / width, cx=cx, cy=cy)


class FlowField(NamedTuple):
    U: object
    V: object
    W: object


@dataclass
class RigidMotion:
    """SE3 element parameterized by the sines of three Euler angles, a
    translation and a rotation pivot: ``X -> R (X - p) + t``."""

    sines: object = field(default_factory=lambda: np.zeros(3))
    t: object = field(default_factory=lambda: np.zeros(3))
    p: object = field(default_factory=lambda: np.zeros(3))

    def rotation(self):
        return rotation_matrix(self.sines)

    def as_dict(self) -> dict:
        return {k: np.asarray(ad.value_of(getattr(self, k)), dtype=float).tolist() for k in ("sines", "t", "p")}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidMotion":
        return cls(*(np.asarray(d.get(k, [0.0, 0.0, 0.0]), dtype=float) for k in ("sines", "t", "p")))


def pixel_grid(w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized coordinates of pixel centres, each of shape (h, w)."""
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    return np.meshgrid(xs, ys)


def backproject(d, K: CameraIntrinsics, w: int, h: int):
    """Point cloud (3, h, w) of a depth map under the pinhole model."""
    xn, yn = pixel_grid(w, h)
    rays = np.stack([(xn - K.cx) / K.f, (yn - K.cy) / K.f, np.ones_like(xn)])
    dv = ad.value_of(d)
    if np.shape(dv) != (h, w):
        raise ValueError(f"depth grid {np.shape(dv)} does not match w={w}, h={h}")
    return ad.reshape(d, (1, h, w)) * rays


def _axis_factors(s):
    """Rx(a), Ry(b), Rz(g) and their derivatives w.r.t. the sines."""
    s = np.asarray(s, dtype=np.float64)
    c = np.sqrt(np.maximum(1.0 - s * s, 0.0))
    dc = -s / np.maximum(c, 1e-12)
    sa, sb, sg = s
    ca, cb, cg = c
    Rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]], dtype=np.float64)
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]], dtype=np.float64)
    Rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]], dtype=np.float64)
    dRx = np.array([[0, 0, 0], [0, dc[0], -1], [0, 1, dc[0]]], dtype=np.float64)
    dRy = np.array([[dc[1], 0, 1], [0, 0, 0], [-1, 0, dc[1]]], dtype=np.float64)
    dRz = np.array([[dc[2], -1, 0], [1, dc[2], 0], [0, 0, 0]], dtype=np.float64)
    return (Rx, Ry, Rz), (dRx, dRy, dRz)


def _rotation_forward(s):
    (Rx, Ry, Rz), _ = _axis_factors(s)
    return Rx @ Ry @ Rz


def _rotation_vjp(g, R, s):
    (Rx, Ry, Rz), (dRx, dRy, dRz) = _axis_factors(s)
    return (np.array([np.sum(g * (dRx @ Ry @ Rz)),
                      np.sum(g * (Rx @ dRy @ Rz)),
                      np.sum(g * (Rx @ Ry @ dRz))]),)


rotation_matrix = ad.make_primitive("rotation_matrix", _rotation_forward, _rotation_vjp)
rotation_matrix.__doc__ = "Rx(a) Ry(b) Rz(g) from the sine vector (sin a, sin b, sin g)."


def rotation_from_sines(sin_alpha, sin_beta, sin_gamma):
    """Standard right-handed R = Rx(alpha) Ry(beta) Rz(gamma), angles in [-pi/2, pi/2]."""
    for v in (sin_alpha, sin_beta, sin_gamma):
        if np.any(np.abs(np.asarray(ad.value_of(v))) > 1.0):
            raise ValueError(f"sine outside [-1, 1]: {ad.value_of(v)}")
    s = ad.stack([sin_alpha, sin_beta, sin_gamma])
    return rotation_matrix(s)


def _rigid_forward(R, t, p, P):
    Q = P - p[:, None, None]
    return np.einsum("ij,jhw->ihw", R, Q) + t[:, None, None]


def _rigid_vjp(g, y, R, t, p, P):
    Q = P - p[:, None, None]
    gR = np.einsum("ihw,jhw->ij", g, Q)
    gP = np.einsum("ij,ihw->jhw", R, g)
    gt = g.sum(axis=(1, 2))
    gp = -R.T @ gt
    return gR, gt, gp, gP


_rigid_apply = ad.make_primitive("rigid_apply", _rigid_forward, _rigid_vjp)


def _check_sines(motion: RigidMotion):
    if np.any(np.abs(np.asarray(ad.value_of(motion.sines))) > 1.0):
        raise ValueError("rigid motion sines outside [-1, 1]")


def transform_points(P, motion: RigidMotion):
    """R (X - p) + t at every point of a (3, h, w) cloud."""
    _check_sines(motion)
    return _rigid_apply(motion.rotation(), motion.t, motion.p, P)


def apply_object_motions(P, masks, motions: Sequence[RigidMotion]):
    """X' = X + sum_k m_k (R_k (X - p_k) + t_k - X)."""
    k = len(motions)
    if k == 0:
        return P
    mshape = np.shape(ad.value_of(masks))
    grid = np.shape(ad.value_of(P))[1:]
    if len(mshape) != 3 or mshape[0] != k or mshape[1:] != grid:
        raise ValueError(f"mask stack of shape {mshape} does not match {k} motions on grid {grid}")
    out = P
    for i, motion in enumerate(motions):
        out = out + masks[i:i + 1] * (transform_points(P, motion) - P)
    return out


def apply_camera_motion(P, cam: RigidMotion):
    """X'' = R_c (X' - p_c) + t_c."""
    return transform_points(P, cam)


def project(P, K: CameraIntrinsics, stats: dict | None = None):
    """Normalized image coordinates (x/w, y/h) of each point.

    Depths below ``Z_MIN`` are clamped; the number of clamped points is added to
    ``stats["clamped"]`` when a dict is given.
    """
    Z = P[2]
    if stats is not None:
        stats["clamped"] = stats.get("clamped", 0) + int(np.count_nonzero(np.asarray(ad.value_of(Z)) < Z_MIN))
    Z = ad.maximum(Z, Z_MIN)
    return K.f * P[0] / Z + K.cx, K.f * P[1] / Z + K.cy


def compute_flow(d, masks, motions: Sequence[RigidMotion], cam: RigidMotion, K: CameraIntrinsics,
                 w: int | None = None, h: int | None = None, stats: dict | None = None) -> FlowField:
    """Dense flow in pixels (U, V) plus the depth component of scene flow W."""
    gh, gw = np.shape(ad.value_of(d))
    w = gw if w is None else w
    h = gh if h is None else h
    P = backproject(d, K, w, h)
    P1 = apply_object_motions(P, masks, motions)
    P2 = apply_camera_motion(P1, cam)
    xn1, yn1 = project(P2, K, stats)
    # reference positions re-projected from the same (constant) cloud, so an
    # identity motion gives exactly zero flow instead of round-off
    xn, yn = pixel_grid(w, h)
    dv = np.asarray(ad.value_of(d))
    P0 = np.asarray(ad.value_of(P))
    ok = dv >= Z_MIN
    xn = np.where(ok, K.f * P0[0] / np.where(ok, dv, 1.0) + K.cx, xn)
    yn = np.where(ok, K.f * P0[1] / np.where(ok, dv, 1.0) + K.cy, yn)
    return FlowField((xn1 - xn) * w, (yn1 - yn) * h, P2[2] - d)
