"""Synthetic rigid scenes with exact ground truth.

A scene is a background plane plus fronto-parallel rectangular patches, each
carrying a band-limited procedural texture that is painted in frame-t image
coordinates.  Frame t+1 is rendered by ray casting every pixel through the
inverse of each surface's rigid motion, so textures stay attached to the
surfaces and the ground-truth flow is exactly the forward geometric model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .geometry import CameraIntrinsics, FlowField, RigidMotion, Z_MIN, compute_flow, rotation_from_sines


class SceneError(ValueError):
    pass


@dataclass
class ObjectSpec:
    # pixel bounds in frame t, half-open: columns x0..x1-1, rows y0..y1-1
    rect: tuple[int, int, int, int]
    depth: float
    motion: RigidMotion = field(default_factory=RigidMotion)


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    # inverse depth of the background: 1/Z = 1/depth + slope_x * X/Z + slope_y * Y/Z
    background_depth: float = 3.0
    background_slope: tuple[float, float] = (0.0, 0.0)
    objects: Sequence[ObjectSpec] = ()
    camera: RigidMotion = field(default_factory=RigidMotion)
    texture_seed: int = 0
    # wavelengths of the texture's sinusoids, in pixels; bilinear resampling
    # error falls off as 1/wavelength^2
    wavelength_range: tuple[float, float] = (9.0, 24.0)
    n_waves: int = 12
    # combined amplitude of the sinusoids around a mid-grey base
    contrast: float = 0.42
    channels: int = 3
    min_in_bounds: float = 0.9


@dataclass
class SceneGroundTruth:
    name: str
    spec: SceneSpec
    I_t: np.ndarray
    I_tp1: np.ndarray
    d_t: np.ndarray
    d_tp1: np.ndarray
    flow: FlowField
    flow_bwd: FlowField
    masks: np.ndarray
    masks_tp1: np.ndarray
    camera: RigidMotion
    objects: list
    camera_bwd: RigidMotion
    objects_bwd: list
    occlusion: np.ndarray

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.spec.intrinsics

    def in_bounds(self) -> np.ndarray:
        h, w = self.d_t.shape
        xs, ys = np.meshgrid(np.arange(w), np.arange(h))
        x = xs + self.flow.U
        y = ys + self.flow.V
        return (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)


def motion_matrix(m: RigidMotion) -> tuple[np.ndarray, np.ndarray]:
    """(A, b) with R (X - p) + t = A X + b."""
    R = rotation_from_sines(*np.asarray(m.sines, dtype=float))
    return R, np.asarray(m.t, dtype=float) - R @ np.asarray(m.p, dtype=float)


def sines_from_rotation(R: np.ndarray) -> np.ndarray:
    """Inverse of ``rotation_from_sines`` for angles in [-pi/2, pi/2]."""
    sb = float(np.clip(R[0, 2], -1.0, 1.0))
    cb = np.sqrt(max(1.0 - sb * sb, 0.0))
    if cb < 1e-12:
        raise SceneError("gimbal lock: beta at +-90 degrees")
    sg = -R[0, 1] / cb
    sa = -R[1, 2] / cb
    out = np.array([sa, sb, sg])
    if np.any(np.abs(out) > 1 + 1e-9) or R[0, 0] < 0 or R[2, 2] < 0:
        raise SceneError("rotation not representable with angles in [-pi/2, pi/2]")
    out = np.clip(out, -1.0, 1.0)
    if not np.allclose(rotation_from_sines(*out), R, atol=1e-9):
        raise SceneError("rotation not representable with angles in [-pi/2, pi/2]")
    return out


def motion_from_matrix(A: np.ndarray, b: np.ndarray) -> RigidMotion:
    return RigidMotion(sines_from_rotation(A), np.asarray(b, dtype=float), np.zeros(3))


def _texture_params(seed: int, spec: SceneSpec, surface: int):
    rng = np.random.default_rng([seed, surface])
    lo, hi = spec.wavelength_range
    lam = rng.uniform(lo, hi, (spec.channels, spec.n_waves))
    theta = rng.uniform(0, 2 * np.pi, (spec.channels, spec.n_waves))
    phase = rng.uniform(0, 2 * np.pi, (spec.channels, spec.n_waves))
    amp = np.full((spec.channels, spec.n_waves), spec.contrast / np.sqrt(spec.n_waves))
    kx = 2 * np.pi * np.cos(theta) / lam * spec.width
    ky = 2 * np.pi * np.sin(theta) / lam * spec.height
    base = rng.uniform(0.4, 0.6, spec.channels)
    return base, amp, kx, ky, phase


def texture(params, xn: np.ndarray, yn: np.ndarray) -> np.ndarray:
    """Evaluate a surface texture at normalized frame-t coordinates; returns (..., c) in [0, 1]."""
    base, amp, kx, ky, phase = params
    arg = kx * xn[..., None, None] + ky * yn[..., None, None] + phase
    val = base + (amp * np.sin(arg)).sum(axis=-1)
    return np.clip(val, 0.0, 1.0)


class _Surface:
    def __init__(self, normal, A, b, rect=None):
        self.normal = np.asarray(normal, dtype=float)
        self.A, self.b = A, b
        self.Ainv = A.T
        self.rect = rect


def _surfaces(spec: SceneSpec, moved: bool) -> list[_Surface]:
    K = spec.intrinsics
    eye = (np.eye(3), np.zeros(3))
    cam = motion_matrix(spec.camera) if moved else eye
    sx, sy = spec.background_slope
    out = [_Surface((sx, sy, 1.0 / spec.background_depth), *cam)]
    for obj in spec.objects:
        if moved:
            Ao, bo = motion_matrix(obj.motion)
            A, b = cam[0] @ Ao, cam[0] @ bo + cam[1]
        else:
            A, b = eye
        x0, y0, x1, y1 = obj.rect
        rect = (x0 / spec.width, y0 / spec.height, x1 / spec.width, y1 / spec.height)
        out.append(_Surface((0.0, 0.0, 1.0 / obj.depth), A, b, rect))
    return out


def _raycast(spec: SceneSpec, surfaces: list[_Surface], xn: np.ndarray, yn: np.ndarray):
    """Nearest surface hit along each pixel ray.

    Returns ``(surface id, depth along the ray, frame-t normalized x, y)``;
    id -1 marks rays that hit nothing.
    """
    K = spec.intrinsics
    r = np.stack([(xn - K.cx) / K.f, (yn - K.cy) / K.f, np.ones_like(xn)], axis=-1)
    best = np.full(xn.shape, np.inf)
    sid = np.full(xn.shape, -1)
    src_x = np.zeros(xn.shape)
    src_y = np.zeros(xn.shape)
    for i, s in enumerate(surfaces):
        n_back = s.Ainv.T @ s.normal  # n . Ainv v == n_back . v
        denom = r @ n_back
        num = 1.0 + s.normal @ (s.Ainv @ s.b)
        with np.errstate(divide="ignore", invalid="ignore"):
            depth = num / denom
        ok = np.isfinite(depth) & (depth > Z_MIN)
        Xt = (depth[..., None] * r - s.b) @ s.Ainv.T
        with np.errstate(divide="ignore", invalid="ignore"):
            xt = K.f * Xt[..., 0] / Xt[..., 2] + K.cx
            yt = K.f * Xt[..., 1] / Xt[..., 2] + K.cy
        ok &= Xt[..., 2] > Z_MIN
        if s.rect is not None:
            x0, y0, x1, y1 = s.rect
            ok &= (xt >= x0) & (xt < x1) & (yt >= y0) & (yt < y1)
        closer = ok & (depth < best)
        best = np.where(closer, depth, best)
        sid = np.where(closer, i, sid)
        src_x = np.where(closer, xt, src_x)
        src_y = np.where(closer, yt, src_y)
    return sid, best, src_x, src_y


def _render(spec: SceneSpec, seed: int, surfaces, xn, yn):
    sid, depth, sx, sy = _raycast(spec, surfaces, xn, yn)
    if np.any(sid < 0):
        raise SceneError("some pixels see no surface")
    img = np.zeros(xn.shape + (spec.channels,))
    for i in range(len(surfaces)):
        sel = sid == i
        if np.any(sel):
            img[sel] = texture(_texture_params(seed, spec, i), sx[sel], sy[sel])
    return img, depth, sid


def _validate(spec: SceneSpec):
    if spec.width < 2 or spec.height < 2:
        raise SceneError("scene must be at least 2x2")
    lo, hi = spec.wavelength_range
    if not 0 < lo <= hi or spec.n_waves < 1 or not spec.contrast > 0:
        raise SceneError("texture needs 0 < wavelength min <= max, n_waves >= 1 and contrast > 0")
    if spec.background_depth <= Z_MIN:
        raise SceneError("background depth must exceed z_min")
    for obj in spec.objects:
        x0, y0, x1, y1 = obj.rect
        if not (0 <= x0 < x1 <= spec.width and 0 <= y0 < y1 <= spec.height):
            raise SceneError(f"object rect {obj.rect} outside the image")
        if obj.depth <= Z_MIN:
            raise SceneError("object depth must exceed z_min")


def _pixel_coords(spec: SceneSpec):
    xs = (np.arange(spec.width) + 0.5) / spec.width
    ys = (np.arange(spec.height) + 0.5) / spec.height
    return np.meshgrid(xs, ys)


def generate_scene(spec: SceneSpec, seed: int | None = None, name: str = "scene") -> SceneGroundTruth:
    """Render a frame pair and its ground truth.  Deterministic in (spec, seed)."""
    _validate(spec)
    seed = spec.texture_seed if seed is None else seed
    w, h, K = spec.width, spec.height, spec.intrinsics
    xn, yn = _pixel_coords(spec)

    still = _surfaces(spec, moved=False)
    moved = _surfaces(spec, moved=True)
    I_t, d_t, sid_t = _render(spec, seed, still, xn, yn)
    I_tp1, d_tp1, sid_tp1 = _render(spec, seed, moved, xn, yn)

    n_obj = len(spec.objects)
    masks = np.stack([(sid_t == i + 1).astype(np.float64) for i in range(n_obj)]) if n_obj else np.zeros((0, h, w))
    masks_tp1 = (np.stack([(sid_tp1 == i + 1).astype(np.float64) for i in range(n_obj)])
                 if n_obj else np.zeros((0, h, w)))
    objects = [obj.motion for obj in spec.objects]
    flow = compute_flow(d_t, masks, objects, spec.camera, K)

    # backward motions: camera inverse for the background, and for each object
    # the motion that composed with the inverse camera undoes object+camera
    Ac, bc = motion_matrix(spec.camera)
    cam_bwd = motion_from_matrix(Ac.T, -Ac.T @ bc)
    objects_bwd = []
    for obj in spec.objects:
        Ao, bo = motion_matrix(obj.motion)
        A = Ac @ Ao.T @ Ac.T
        # cam_bwd(obj_bwd(X)) must equal Ao^T (Ac^T (X - bc) - bo)
        b = Ac @ (-Ao.T @ (Ac.T @ bc) - Ao.T @ bo) + bc
        objects_bwd.append(motion_from_matrix(A, b))
    flow_bwd = compute_flow(d_tp1, masks_tp1, objects_bwd, cam_bwd, K)

    occlusion = _occlusion(spec, moved, sid_t, flow, d_t, xn, yn)
    inb = _in_bounds(flow)
    if inb.mean() < spec.min_in_bounds:
        raise SceneError(f"only {inb.mean():.2f} of pixels stay in bounds (< {spec.min_in_bounds})")
    return SceneGroundTruth(name, spec, I_t, I_tp1, d_t, d_tp1, flow, flow_bwd, masks, masks_tp1,
                            spec.camera, objects, cam_bwd, objects_bwd, occlusion)


def _in_bounds(flow: FlowField) -> np.ndarray:
    h, w = np.shape(flow.U)
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    x, y = xs + flow.U, ys + flow.V
    return (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)


def _occlusion(spec, moved, sid_t, flow, d_t, xn, yn) -> np.ndarray:
    """Pixels whose frame-t+1 correspondence is hidden, or whose bilinear
    support in frame t+1 straddles a different surface."""
    w, h = spec.width, spec.height
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    x = xs + flow.U
    y = ys + flow.V
    inb = _in_bounds(flow)
    target_sid, target_depth, _, _ = _raycast(spec, moved, (x + 0.5) / w, (y + 0.5) / h)
    z2 = d_t + flow.W
    occluded = (target_sid != sid_t) | (np.abs(target_depth - z2) > 1e-6 * np.maximum(1.0, z2))
    sid_grid = _raycast(spec, moved, xn, yn)[0]
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.clip(np.floor(xc).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(yc).astype(int), 0, h - 2)
    for dy in (0, 1):
        for dx in (0, 1):
            occluded |= sid_grid[y0 + dy, x0 + dx] != sid_t
    return occluded & inb


def _translate(t) -> RigidMotion:
    return RigidMotion(np.zeros(3), np.asarray(t, dtype=float), np.zeros(3))


def standard_suite(size: int = 64) -> dict[str, SceneSpec]:
    """Named scenes covering static, camera-only, object-only and combined motion."""
    s = size

    def rect(cx, cy, half):
        return (int(round((cx - half) * s)), int(round((cy - half) * s)),
                int(round((cx + half) * s)), int(round((cy + half) * s)))

    base = SceneSpec(width=s, height=s, background_depth=3.0, background_slope=(0.12, 0.06))
    return {
        "static": replace(base, texture_seed=1),
        "cam-translate": replace(base, texture_seed=2, camera=_translate((0.10, 0.03, 0.06))),
        "cam-rotate": replace(base, texture_seed=3,
                              camera=RigidMotion(np.array([0.012, -0.02, 0.01]), np.zeros(3), np.zeros(3))),
        "one-object": replace(base, texture_seed=4, objects=[
            ObjectSpec(rect(0.45, 0.5, 0.17), 1.6, _translate((0.06, 0.02, 0.0)))]),
        "two-objects": replace(base, texture_seed=5, objects=[
            ObjectSpec(rect(0.27, 0.3, 0.13), 1.5, _translate((0.05, 0.0, 0.0))),
            ObjectSpec(rect(0.7, 0.68, 0.14), 1.8, _translate((-0.02, -0.05, 0.0)))]),
        "object+camera": replace(base, texture_seed=6, camera=_translate((0.08, 0.0, 0.04)), objects=[
            ObjectSpec(rect(0.5, 0.5, 0.17), 1.6, _translate((-0.06, 0.04, 0.0)))]),
    }
