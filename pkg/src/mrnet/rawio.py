"""Self-describing raw array files and PNG helpers.

Layout: 4-byte magic ``MRA1``, little-endian uint32 header length, a UTF-8
JSON header ``{"dtype", "shape", "range"}``, then C-order little-endian data.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"MRA1"


class RawFormatError(ValueError):
    pass


def write_array(path: str | Path, arr: np.ndarray, value_range: tuple[float, float] | None = None) -> Path:
    path = Path(path)
    arr = np.ascontiguousarray(arr)
    data = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    if value_range is None:
        value_range = (float(arr.min()), float(arr.max())) if arr.size else (0.0, 0.0)
    header = json.dumps({
        "dtype": data.dtype.str,
        "shape": list(arr.shape),
        "range": [float(value_range[0]), float(value_range[1])],
    }).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(data.tobytes())
    return path


def read_array(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise RawFormatError(f"{path}: not a raw array file (bad magic)")
    (n,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8:8 + n])
        dtype = np.dtype(header["dtype"])
        shape = tuple(header["shape"])
    except (ValueError, KeyError) as exc:
        raise RawFormatError(f"{path}: corrupt header ({exc})") from None
    body = blob[8 + n:]
    expected = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
    if len(body) != expected:
        raise RawFormatError(f"{path}: expected {expected} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), header


def to_uint8(img: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    scaled = (np.clip(img, lo, hi) - lo) / (hi - lo)
    return np.round(scaled * 255).astype(np.uint8)


def save_png(path: str | Path, img: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img, lo, hi)).save(path)
    return path


def save_rgb_png(path: str | Path, rgb: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)
    return path


def load_image(path: str | Path) -> np.ndarray:
    """Load a single-channel image in [-1, 1] from a raw array file or a PNG."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        gray = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
        return gray * 2 - 1
    arr, _ = read_array(path)
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[0]
    if arr.ndim != 2:
        raise RawFormatError(f"{path}: expected a 2-D image or a C x H x W stack, got shape {arr.shape}")
    return arr
