"""Image persistence: 8-bit PNG (via pillow) and the lossless float dump
used for exact test comparison (header "MMGSIMG1", u32 H, u32 W, then
row-major little-endian f32 HxWx3)."""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

FLOAT_MAGIC = b"MMGSIMG1"


def to_uint8(values):
    return np.round(255.0 * np.clip(values, 0.0, 1.0)).astype(np.uint8)


def write_png(path, values):
    """Write float values in [0,1] (HxWx3 rgb or HxW gray) as 8-bit PNG."""
    arr = to_uint8(np.asarray(values))
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def write_png_ids(path, ids):
    """Write an integer id image (e.g. instance masks) as 8-bit gray PNG."""
    arr = np.asarray(ids)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("id image values must fit in uint8")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")


def read_png(path):
    """Read a PNG as float32 in [0,1]; rgb images give HxWx3, gray HxW."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr.astype(np.float32) / 255.0


def read_png_ids(path):
    """Read an 8-bit gray PNG as raw integer ids."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"expected a grayscale id image at {path}")
    return arr.astype(np.int32)


def write_float_image(path, values):
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("float image dump expects an HxWx3 array")
    with open(path, "wb") as f:
        f.write(FLOAT_MAGIC)
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def read_float_image(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != FLOAT_MAGIC:
            raise ValueError(f"bad float image magic {magic!r}")
        h, w = struct.unpack("<II", f.read(8))
        payload = f.read(h * w * 3 * 4)
    if len(payload) != h * w * 3 * 4:
        raise ValueError(f"truncated float image at byte {16 + len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, 3).copy()
