"""Grayscale image manipulations, quality metrics and 8-bit PGM I/O.

Images are 2-D float32 arrays with pixels in [0, 1].
"""

from __future__ import annotations

import math
import os
import re

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_INF = math.inf


class PGMError(ValueError):
    """Malformed or unsupported PGM file."""


def _as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    return arr


def median_filter(img, k: int) -> np.ndarray:
    """k x k median with edge replication at the borders; output keeps the input extents."""
    img = _as_image(img)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median window must be odd and positive, got {k}")
    if k > min(img.shape):
        raise ValueError(f"median window {k} exceeds image extents {img.shape}")
    if k == 1:
        return img.copy()
    r = k // 2
    padded = np.pad(img, r, mode="edge")
    win = sliding_window_view(padded, (k, k)).reshape(img.shape[0], img.shape[1], k * k)
    # k*k is odd, so the median is the middle order statistic (no averaging)
    mid = (k * k) // 2
    return np.partition(win, mid, axis=-1)[..., mid].astype(np.float32)


def _resample_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def downsample(img, factor: float) -> np.ndarray:
    """Bilinear resize by ``factor`` in (0, 1] with half-pixel centres and no prefilter."""
    img = _as_image(img)
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"downsampling factor must lie in (0, 1], got {factor}")
    h, w = img.shape
    oh, ow = int(math.floor(h * factor + 0.5)), int(math.floor(w * factor + 0.5))
    if oh < 1 or ow < 1:
        raise ValueError(f"downsampling {h}x{w} by {factor} gives a degenerate {oh}x{ow} image")
    if (oh, ow) == (h, w):
        return img.copy()
    src = img.astype(np.float64)
    y0, y1, fy = _resample_axis(h, oh)
    x0, x1, fx = _resample_axis(w, ow)
    rows = src[y0] * (1 - fy)[:, None] + src[y1] * fy[:, None]
    out = rows[:, x0] * (1 - fx)[None, :] + rows[:, x1] * fx[None, :]
    return out.astype(np.float32)


def mse(a, b) -> float:
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"image extents differ: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def psnr(a, b) -> float:
    """PSNR in dB for peak 1.0; ``math.inf`` when the images are identical."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / err)


def quantize8(img) -> np.ndarray:
    """Round to the nearest multiple of 1/255 (halves away from zero)."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return (np.floor(arr * 255.0 + 0.5) / 255.0).astype(np.float32)


def to_bytes8(img) -> np.ndarray:
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def on_grid8(img) -> bool:
    arr = np.asarray(img, dtype=np.float32)
    return bool(np.array_equal(quantize8(arr), arr))


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*([^\s#]+)")


def decode_pgm(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise PGMError(f"{name}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w_tok, h_tok, max_tok = tokens
    if magic != b"P5":
        raise PGMError(f"{name}: bad magic {magic[:8]!r}, expected b'P5'")
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError as exc:
        raise PGMError(f"{name}: non-numeric header field ({exc})") from None
    if width <= 0 or height <= 0:
        raise PGMError(f"{name}: invalid extents {width}x{height}")
    if maxval != 255:
        raise PGMError(f"{name}: unsupported maxval {maxval} (only 255 is accepted)")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise PGMError(f"{name}: missing whitespace after maxval")
    pos += 1
    payload = raw[pos:]
    need = width * height
    if len(payload) < need:
        raise PGMError(f"{name}: truncated payload ({len(payload)} of {need} bytes)")
    if len(payload) > need:
        raise PGMError(f"{name}: {len(payload) - need} trailing bytes after payload")
    pix = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return (pix.astype(np.float64) / 255.0).astype(np.float32)


def encode_pgm(img) -> bytes:
    img = _as_image(img)
    if not on_grid8(img):
        raise ValueError("image pixels are not on the 8-bit grid; quantize8 it first")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + to_bytes8(img).tobytes()


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode_pgm(raw, os.fspath(path))


def save_pgm(img, path) -> None:
    data = encode_pgm(img)
    with open(path, "wb") as fh:
        fh.write(data)
