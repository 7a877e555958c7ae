"""On-disk formats: the .ltx float container, PFM, and PNG export.

.ltx layout: magic b"LTX1", then u32 H, W, C (little-endian), then
H*W*C float32 little-endian values, row-major, channel-last.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ShapeError

LTX_MAGIC = b"LTX1"


def save_ltx(path, array: np.ndarray):
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError("ltx stores (H, W, C) arrays")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(LTX_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(arr.tobytes())


def load_ltx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != LTX_MAGIC:
            raise ShapeError(f"{path}: not an LTX1 file")
        h, w, c = struct.unpack("<III", fh.read(12))
        data = fh.read(h * w * c * 4)
    if len(data) != h * w * c * 4:
        raise ShapeError(f"{path}: truncated payload")
    return np.frombuffer(data, dtype="<f4").reshape(h, w, c).copy()


def save_pfm(path, array: np.ndarray):
    """Little-endian PFM; 1 or 3 channels, bottom row first per the format."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if c not in (1, 3):
        raise ShapeError("PFM supports 1 or 3 channels")
    header = b"PF\n" if c == 3 else b"Pf\n"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")  # negative scale marks little-endian
        fh.write(np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ShapeError(f"{path}: not a PFM file")
        c = 3 if kind == b"PF" else 1
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        data = fh.read(h * w * c * 4)
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype).reshape(h, w, c)
    return arr[::-1].astype(np.float32)


def save_png(path, array: np.ndarray):
    """8-bit PNG; values are treated as display-ready in [0, 1]."""
    from PIL import Image

    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def channel_mosaic(array: np.ndarray) -> np.ndarray:
    """Per-channel min-max normalized grid (2x2 for C=4) for latent previews."""
    arr = np.asarray(array, dtype=np.float32)
    h, w, c = arr.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    out = np.zeros((rows * h, cols * w), dtype=np.float32)
    for k in range(c):
        ch = arr[:, :, k]
        lo, hi = float(ch.min()), float(ch.max())
        norm = (ch - lo) / (hi - lo) if hi > lo else np.zeros_like(ch)
        r, cc = divmod(k, cols)
        out[r * h:(r + 1) * h, cc * w:(cc + 1) * w] = norm
    return out
