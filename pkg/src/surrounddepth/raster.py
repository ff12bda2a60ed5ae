"""Binary raster formats for depth maps, images and parameter snapshots.

All formats are little-endian:

* depth (``SDPT``): magic, u32 width, u32 height, width*height f32 depths;
  values <= 0 or non-finite mark invalid pixels.
* image (``SIMG``): magic, u32 width, u32 height, u32 channels, then
  height*width*channels f32 values in row-major, channel-interleaved order.
* parameters (``SWGT``): magic, u32 count, u32 dtype flag (0 = f32,
  1 = f64), then the flat parameter list.

8-bit PNG images are also accepted and scaled to [0, 1].
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

DEPTH_MAGIC = b"SDPT"
IMAGE_MAGIC = b"SIMG"
WEIGHT_MAGIC = b"SWGT"


class RasterFormatError(ValueError):
    pass


def write_depth(path, depth: np.ndarray, valid: np.ndarray | None = None) -> None:
    d = np.asarray(depth, dtype=np.float64)
    if valid is not None:
        d = np.where(valid, d, 0.0)
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC + struct.pack("<II", w, h))
        f.write(d.astype("<f4").tobytes())


def read_depth(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(depth, valid)`` with invalid pixels zeroed."""
    raw = Path(path).read_bytes()
    if raw[:4] != DEPTH_MAGIC or len(raw) < 12:
        raise RasterFormatError(f"{path}: not a depth raster")
    w, h = struct.unpack_from("<II", raw, 4)
    if len(raw) != 12 + 4 * w * h:
        raise RasterFormatError(f"{path}: size does not match {w}x{h} header")
    d = np.frombuffer(raw, dtype="<f4", offset=12).astype(np.float64).reshape(h, w)
    valid = np.isfinite(d) & (d > 0)
    return np.where(valid, d, 0.0), valid


def write_image(path, data: np.ndarray) -> None:
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    h, w, c = a.shape
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC + struct.pack("<III", w, h, c))
        f.write(a.astype("<f4").tobytes())


def read_image(path) -> np.ndarray:
    """Load a ``SIMG`` raster or 8-bit PNG as an (H, W, C) float array in [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == IMAGE_MAGIC:
        if len(raw) < 16:
            raise RasterFormatError(f"{path}: truncated header")
        w, h, c = struct.unpack_from("<III", raw, 4)
        if len(raw) != 16 + 4 * w * h * c:
            raise RasterFormatError(f"{path}: size does not match {w}x{h}x{c} header")
        return np.frombuffer(raw, dtype="<f4", offset=16).astype(np.float64).reshape(h, w, c)
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            a = np.asarray(im, dtype=np.float64) / 255.0
        return a[:, :, None] if a.ndim == 2 else a
    raise RasterFormatError(f"{path}: unknown image format")


def write_weights(path, values, double: bool = True) -> None:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC + struct.pack("<II", v.size, 1 if double else 0))
        f.write(v.astype("<f8" if double else "<f4").tobytes())


def read_weights(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHT_MAGIC or len(raw) < 12:
        raise RasterFormatError(f"{path}: not a parameter snapshot")
    n, flag = struct.unpack_from("<II", raw, 4)
    if flag not in (0, 1):
        raise RasterFormatError(f"{path}: bad dtype flag {flag}")
    dt = "<f8" if flag else "<f4"
    size = 8 if flag else 4
    if len(raw) != 12 + size * n:
        raise RasterFormatError(f"{path}: size does not match count {n}")
    return np.frombuffer(raw, dtype=dt, offset=12).astype(np.float64)
