"""Differentiable backward warping through a flow field.

Pixel centres sit on integer coordinates.  A sample at ``(x, y)`` is valid
when its bilinear support lies inside the image, i.e. ``0 <= x <= w - 1`` and
``0 <= y <= h - 1``; invalid samples read as 0.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def _support(x: np.ndarray, y: np.ndarray, h: int, w: int):
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    # clamp the base index so x == w - 1 uses the last cell with weight 1 on its right edge
    x0 = np.clip(np.floor(xs), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(ys), 0, max(h - 2, 0)).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return valid, x0, x1, y0, y1, fx, fy


def _as_channels(src: np.ndarray) -> np.ndarray:
    return src[..., None] if src.ndim == 2 else src


def _sample_forward(src, x, y):
    src = np.asarray(src, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h, w = src.shape[:2]
    valid, x0, x1, y0, y1, fx, fy = _support(x, y, h, w)
    ad.note_branch(np.stack([valid, x0, y0]))
    s = _as_channels(src)
    fx_, fy_ = fx[..., None], fy[..., None]
    out = ((1 - fy_) * ((1 - fx_) * s[y0, x0] + fx_ * s[y0, x1])
           + fy_ * ((1 - fx_) * s[y1, x0] + fx_ * s[y1, x1]))
    out = out * valid[..., None]
    return out.reshape(x.shape + src.shape[2:])


def _sample_vjp(g, out, src, x, y):
    src = np.asarray(src, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h, w = src.shape[:2]
    valid, x0, x1, y0, y1, fx, fy = _support(x, y, h, w)
    s = _as_channels(src)
    g = _as_channels(np.asarray(g)) * valid[..., None]
    fx_, fy_ = fx[..., None], fy[..., None]
    s00, s01, s10, s11 = s[y0, x0], s[y0, x1], s[y1, x0], s[y1, x1]
    gx = (g * ((1 - fy_) * (s01 - s00) + fy_ * (s11 - s10))).sum(axis=-1)
    gy = (g * ((1 - fx_) * (s10 - s00) + fx_ * (s11 - s01))).sum(axis=-1)

    nc = s.shape[-1]
    gsrc = np.zeros((h * w, nc))
    # bincount reduces in a fixed order, keeping the adjoint deterministic
    for yi, xi, wgt in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x1, (1 - fy) * fx),
                        (y1, x0, fy * (1 - fx)), (y1, x1, fy * fx)):
        flat = (yi * w + xi).reshape(-1)
        for c in range(nc):
            gsrc[:, c] += np.bincount(flat, weights=(g[..., c] * wgt).reshape(-1),
                                      minlength=h * w)
    return gsrc.reshape(src.shape), gx, gy


_bilinear = ad.make_primitive("bilinear_sample", _sample_forward, _sample_vjp)


def bilinear_sample(src, x, y):
    """Sample ``src`` (h, w) or (h, w, c) at continuous pixel positions.

    Returns ``(values, valid)``; ``valid`` is a boolean (h, w) array.
    """
    sv = np.asarray(ad.value_of(src))
    if sv.size == 0:
        raise ValueError("cannot sample an empty source")
    h, w = sv.shape[:2]
    valid = _support(np.asarray(ad.value_of(x)), np.asarray(ad.value_of(y)), h, w)[0]
    return _bilinear(src, x, y), valid


def sample_grid(flow_u, flow_v):
    """Absolute sample positions ``(x + U, y + V)`` for every pixel."""
    h, w = np.shape(ad.value_of(flow_u))
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return xs + flow_u, ys + flow_v


def inverse_warp(target, flow):
    """Warp ``target`` (the second frame) back to the first frame's pixels."""
    tv = np.asarray(ad.value_of(target))
    if tv.shape[:2] != np.shape(ad.value_of(flow[0])):
        raise ValueError(f"target {tv.shape[:2]} and flow {np.shape(ad.value_of(flow[0]))} disagree")
    x, y = sample_grid(flow[0], flow[1])
    return bilinear_sample(target, x, y)
