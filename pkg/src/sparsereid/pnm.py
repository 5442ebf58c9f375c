"""Binary portable pixmap (P6) reading and writing."""
from __future__ import annotations

import os

import numpy as np


class PNMError(ValueError):
    pass


def _tokens(buf: bytes, count: int):
    """Split the first ``count`` header fields, skipping ``#`` comments."""
    out, i, n = [], 2, len(buf)
    while len(out) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise PNMError("truncated header")
        out.append(buf[start:i])
    return out, i + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    """Return an ``H x W x 3`` array (uint8, or uint16 when maxval > 255)."""
    if buf[:2] != b"P6":
        raise PNMError(f"not a P6 pixmap (magic {buf[:2]!r})")
    fields, offset = _tokens(buf, 3)
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise PNMError(f"bad header fields {fields}") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise PNMError(f"bad dimensions {width}x{height} maxval {maxval}")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = width * height * 3 * dtype.itemsize
    payload = buf[offset:offset + need]
    if len(payload) != need:
        raise PNMError(f"expected {need} pixel bytes, found {len(payload)}")
    img = np.frombuffer(payload, dtype=dtype).reshape(height, width, 3)
    return img.astype(np.uint16) if maxval >= 256 else img.copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise PNMError(f"expected H x W x 3, got {img.shape}")
    if img.dtype != np.uint8:
        raise PNMError(f"expected uint8 pixels, got {img.dtype}")
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_ppm(path, img: np.ndarray) -> None:
    data = encode_ppm(img)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def to_chw(img: np.ndarray) -> np.ndarray:
    """uint8 ``H x W x 3`` -> float32 ``3 x H x W`` in [0, 1]."""
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return (np.asarray(img, dtype=np.float32) / scale).transpose(2, 0, 1)


def to_hwc_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(np.asarray(img).transpose(1, 2, 0), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
