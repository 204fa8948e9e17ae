"""Image, depth and flow file formats.

Images: 8-bit PNG and binary PPM (P6), float values in [0, 1] in memory.
Depth: PFM (little-endian float32) or 16-bit PNG with a declared scale.
Flow: Middlebury ``.flo``.  All writers go through a temporary file and an
atomic rename.
"""

from __future__ import annotations

import io as _io
import os
import re
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

FLO_MAGIC = b"PIEH"


class ParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# --- PPM ---------------------------------------------------------------------

_TOKEN = re.compile(rb"\S+")


def _ppm_header(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ParseError("truncated PPM header", pos)
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        m = _TOKEN.match(data, pos)
        tok = m.group()
        if b"#" in tok:
            tok = tok[:tok.index(b"#")]
        tokens.append((tok, pos))
        pos += len(tok)
    return tokens, pos


def parse_ppm(data: bytes) -> np.ndarray:
    (magic, _), = _ppm_header(data, 1)[0]
    if magic != b"P6":
        raise ParseError(f"not a binary PPM (magic {magic!r})", 0)
    tokens, pos = _ppm_header(data, 4)
    values = []
    for tok, off in tokens[1:]:
        if not tok.isdigit():
            raise ParseError(f"invalid PPM header field {tok!r}", off)
        values.append(int(tok))
    w, h, maxval = values
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ParseError(f"invalid PPM dimensions or maxval {w}x{h}/{maxval}", tokens[1][1])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after PPM header", pos)
    pos += 1
    nbytes = 1 if maxval < 256 else 2
    need = w * h * 3 * nbytes
    if len(data) - pos < need:
        raise ParseError(f"truncated PPM payload: need {need} bytes, have {len(data) - pos}", len(data))
    dtype = np.uint8 if nbytes == 1 else np.dtype(">u2")
    pix = np.frombuffer(data, dtype=dtype, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return pix.astype(np.float64) / maxval


def encode_ppm(img) -> bytes:
    arr = to_uint8(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.shape[2] != 3:
        raise ValueError("PPM needs 1 or 3 channels")
    h, w = arr.shape[:2]
    return f"P6 {w} {h} 255\n".encode() + arr.tobytes()


# --- images ------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Return an (h, w, c) float image in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] == b"P6":
        return parse_ppm(data)
    try:
        img = Image.open(_io.BytesIO(data))
        img.load()
    except Exception as err:
        raise ParseError(f"cannot decode image {path}: {err}") from err
    if img.mode in ("I;16", "I;16B", "I"):
        raise ParseError(f"{path} is a 16-bit image; use read_depth")
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def write_image(path, img) -> None:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        atomic_write(path, encode_ppm(img))
        return
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    buf = _io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


# --- depth -------------------------------------------------------------------

def parse_pfm(data: bytes) -> np.ndarray:
    lines, pos = [], 0
    for _ in range(3):
        end = data.find(b"\n", pos)
        if end < 0:
            raise ParseError("truncated PFM header", len(data))
        lines.append((data[pos:end].strip(), pos))
        pos = end + 1
    (magic, _), (dims, doff), (scale_s, soff) = lines
    if magic not in (b"Pf", b"PF"):
        raise ParseError(f"not a PFM file (magic {magic!r})", 0)
    try:
        w, h = (int(v) for v in dims.split())
    except ValueError:
        raise ParseError(f"invalid PFM dimensions {dims!r}", doff) from None
    try:
        scale = float(scale_s)
    except ValueError:
        raise ParseError(f"invalid PFM scale {scale_s!r}", soff) from None
    if scale == 0:
        raise ParseError("PFM scale must be nonzero", soff)
    chans = 1 if magic == b"Pf" else 3
    need = w * h * chans * 4
    if len(data) - pos < need:
        raise ParseError(f"truncated PFM payload: need {need} bytes, have {len(data) - pos}", len(data))
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    arr = np.frombuffer(data, dtype=dtype, count=w * h * chans, offset=pos)
    arr = arr.reshape(h, w, chans) if chans == 3 else arr.reshape(h, w)
    # PFM rows run bottom to top
    return arr[::-1].astype(np.float64)


def encode_pfm(depth) -> bytes:
    arr = np.asarray(depth, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("depth must be a 2-D grid")
    h, w = arr.shape
    return f"Pf\n{w} {h}\n-1.0\n".encode() + np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes()


def read_depth(path, scale: float = 1.0 / 1000.0) -> np.ndarray:
    """Depth grid; 16-bit PNGs are multiplied by ``scale``.  0 means no depth."""
    data = Path(path).read_bytes()
    if data[:2] in (b"Pf", b"PF"):
        return parse_pfm(data)
    try:
        img = Image.open(_io.BytesIO(data))
        img.load()
    except Exception as err:
        raise ParseError(f"cannot decode depth image {path}: {err}") from err
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ParseError(f"depth image {path} must be single-channel")
    return arr.astype(np.float64) * scale


def write_depth(path, depth, scale: float = 1.0 / 1000.0) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        arr = np.asarray(depth, dtype=np.float64) / scale
        if np.any(arr < 0) or np.any(arr > 65535):
            raise ValueError("depth out of range for 16-bit PNG at this scale")
        buf = _io.BytesIO()
        Image.fromarray(np.rint(arr).astype(np.uint16)).save(buf, format="PNG")
        atomic_write(path, buf.getvalue())
    else:
        atomic_write(path, encode_pfm(depth))


# --- flow --------------------------------------------------------------------

def parse_flo(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    if data[:4] != FLO_MAGIC:
        raise ParseError(f"bad .flo magic {data[:4]!r}", 0)
    if len(data) < 12:
        raise ParseError("truncated .flo header", len(data))
    w, h = np.frombuffer(data, dtype="<i4", count=2, offset=4)
    if w <= 0 or h <= 0:
        raise ParseError(f"invalid .flo dimensions {w}x{h}", 4)
    need = int(w) * int(h) * 8
    if len(data) - 12 < need:
        raise ParseError(f"truncated .flo payload: need {need} bytes, have {len(data) - 12}", len(data))
    uv = np.frombuffer(data, dtype="<f4", count=int(w) * int(h) * 2, offset=12).reshape(h, w, 2)
    return uv[..., 0].astype(np.float64), uv[..., 1].astype(np.float64)


def encode_flo(U, V) -> bytes:
    U = np.asarray(U)
    V = np.asarray(V)
    if U.shape != V.shape or U.ndim != 2:
        raise ValueError("U and V must be matching 2-D grids")
    h, w = U.shape
    uv = np.stack([U, V], axis=-1).astype("<f4")
    return FLO_MAGIC + np.array([w, h], dtype="<i4").tobytes() + uv.tobytes()


def read_flo(path) -> tuple[np.ndarray, np.ndarray]:
    return parse_flo(Path(path).read_bytes())


def write_flo(path, U, V) -> None:
    atomic_write(path, encode_flo(U, V))


def _hsv_to_rgb(hue, sat, val):
    """Vectorized HSV -> RGB, every input in [0, 1]."""
    h6 = (hue % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = val * (1 - sat)
    q = val * (1 - sat * f)
    t = val * (1 - sat * (1 - f))
    table = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)]
    out = np.zeros(hue.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        out[sel] = np.stack([r[sel], g[sel], b[sel]], axis=-1)
    return out


def flow_to_color(U, V, percentile: float = 99.0) -> np.ndarray:
    """Hue by direction, saturation by magnitude normalized by its percentile; zero flow is white."""
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    mag = np.hypot(U, V)
    ref = np.percentile(mag, percentile) if mag.size else 0.0
    if ref <= 0:
        ref = mag.max() if mag.size and mag.max() > 0 else 1.0
    sat = np.clip(mag / ref, 0.0, 1.0)
    hue = (np.arctan2(V, U) / (2 * np.pi)) % 1.0
    return _hsv_to_rgb(hue, sat, np.ones_like(sat))
