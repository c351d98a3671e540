"""Image I/O: 8-bit PNG frames plus lossless float dumps for comparisons.

The raw dump format is a flat little-endian float32 binary with a 16-byte
header: magic "MSTI", then width, height, channels as u32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

RAW_MAGIC = b"MSTI"


def write_png(path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] (H, W, 3) or (H, W) as 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(Path(path))


def read_png(path) -> np.ndarray:
    img = Image.open(Path(path))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr


def write_raw(path, image: np.ndarray) -> None:
    img = np.atleast_3d(np.asarray(image, dtype=np.float32))
    h, w, c = img.shape
    with open(Path(path), "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<III", w, h, c))
        f.write(np.ascontiguousarray(img).astype("<f4").tobytes())


def read_raw(path) -> np.ndarray:
    with open(Path(path), "rb") as f:
        if f.read(4) != RAW_MAGIC:
            raise ValueError(f"{path} is not a raw image dump")
        w, h, c = struct.unpack("<III", f.read(12))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != w * h * c:
        raise ValueError(f"truncated raw image {path}")
    img = data.reshape(h, w, c)
    return img[:, :, 0] if c == 1 else img
