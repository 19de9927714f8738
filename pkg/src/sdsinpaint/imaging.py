"""Image file I/O and resampling.

PNG files are 8-bit (RGB for color, L for masks).  PFM files store 32-bit
little-endian floats, bottom row first, with a negative scale line.
"""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError


def quantize_u8(img) -> np.ndarray:
    """Float image in [0, 1] -> uint8, rounding to nearest."""
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def dequantize_u8(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float32) / np.float32(255.0)


def write_png(path, img) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = quantize_u8(img)
    Image.fromarray(img).save(path)


def read_png(path) -> np.ndarray:
    """RGB image as float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            return dequantize_u8(np.asarray(im.convert("RGB")))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{path}: cannot read PNG ({exc})") from exc


def write_mask_png(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)).save(path)


def read_mask_png(path, threshold: int = 128) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) >= threshold
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{path}: cannot read mask PNG ({exc})") from exc


def write_pfm(path, data) -> None:
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs HxW or HxWx3 data, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            tag = f.readline().strip()
            dims = f.readline().split()
            scale = float(f.readline())
            raw = f.read()
        if tag not in (b"PF", b"Pf") or len(dims) != 2:
            raise ValueError("bad header")
        w, h = int(dims[0]), int(dims[1])
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{path}: not a PFM file ({exc})") from exc
    ch = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    if len(raw) != w * h * ch * 4:
        raise DatasetError(f"{path}: expected {w * h * ch * 4} data bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(h, w, ch)[::-1].astype(np.float32)
    return data[..., 0] if ch == 1 else data


# -- bilinear resampling as a separable linear operator ----------------------


@lru_cache(maxsize=64)
def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation, edge clamped; rows sum to 1."""
    m = np.zeros((n_out, n_in))
    if n_out == n_in:
        np.fill_diagonal(m, 1.0)
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(img, height: int, width: int) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    ry = _interp_matrix(height, h).astype(img.dtype)
    rx = _interp_matrix(width, w).astype(img.dtype)
    return np.einsum("ah,hw...,bw->ab...", ry, img, rx)


def resize_bilinear_adjoint(grad, height: int, width: int) -> np.ndarray:
    """Transpose of :func:`resize_bilinear` from an ``(height, width)`` source."""
    grad = np.asarray(grad)
    h, w = grad.shape[:2]
    if (h, w) == (height, width):
        return grad.copy()
    ry = _interp_matrix(h, height).astype(grad.dtype)
    rx = _interp_matrix(w, width).astype(grad.dtype)
    return np.einsum("ah,ab...,bw->hw...", ry, grad, rx)


def downsample2(img) -> np.ndarray:
    """2x2 box filter (trailing odd row/column dropped)."""
    img = np.asarray(img)
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    x = img[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
