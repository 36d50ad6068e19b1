"""Image file I/O.

PNG covers the 8-bit human-facing outputs. For lossless float images (error
maps, intermediate renders) there is a tiny private container: the magic
bytes "NGSF", three little-endian u32 for height, width and channels, then
the raw float32 samples row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CorruptHeaderError, MissingFileError, ShapeMismatchError

NGSF_MAGIC = b"NGSF"


def write_png(path, img: np.ndarray) -> None:
    """Save a float image in [0, 1] (H, W) or (H, W, 3) as 8-bit PNG."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ShapeMismatchError(f"expected (H, W) or (H, W, C), got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(str(path))


def read_png(path) -> np.ndarray:
    """Load a PNG as float64 in [0, 1], always (H, W, 3)."""
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"no such image: {p}")
    with Image.open(p) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def write_ngsf(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3:
        raise ShapeMismatchError(f"expected (H, W) or (H, W, C), got {img.shape}")
    h, w, c = img.shape
    with open(path, "wb") as f:
        f.write(NGSF_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(img).tobytes())


def read_ngsf(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"no such image: {p}")
    raw = p.read_bytes()
    if len(raw) < 16 or raw[:4] != NGSF_MAGIC:
        raise CorruptHeaderError(f"{p} is not a float image file")
    h, w, c = struct.unpack("<III", raw[4:16])
    expect = 16 + h * w * c * 4
    if len(raw) != expect:
        raise CorruptHeaderError(f"{p}: expected {expect} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, c)
    return data.astype(np.float64)
