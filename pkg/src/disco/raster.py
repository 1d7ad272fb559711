"""Uncompressed 8-bit raster image I/O (no codec dependencies).

Layout: ASCII header line "RAS1 <width> <height> <channels>\\n" followed by
exactly width*height*channels raw bytes, row-major top-to-bottom, channels
interleaved. Intensities map linearly between byte 0..255 and float 0..1.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError

MAGIC = b"RAS1"


def read_image(path: str) -> np.ndarray:
    """Read an image; returns (C,H,W) float32 in [0,1]."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    nl = buf.find(b"\n")
    if nl < 0:
        raise DataError("raster: missing header newline")
    parts = buf[:nl].split()
    if len(parts) != 4 or parts[0] != MAGIC:
        raise DataError(f"raster: bad header {buf[:nl]!r} (expected 'RAS1 W H C')")
    try:
        width, height, channels = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError as exc:
        raise DataError(f"raster: malformed dimensions: {exc}") from exc
    if channels not in (1, 3) or width < 1 or height < 1:
        raise DataError(f"raster: unsupported geometry {width}x{height}x{channels}")
    need = width * height * channels
    have = len(buf) - nl - 1
    if have != need:
        raise DataError(
            f"raster: payload is {have} bytes, expected exactly {need} "
            f"(header ends at byte {nl})"
        )
    flat = np.frombuffer(buf, dtype=np.uint8, count=need, offset=nl + 1)
    img = flat.reshape(height, width, channels).transpose(2, 0, 1)
    return (img.astype(np.float32) / 255.0).copy()


def write_image(path: str, data: np.ndarray) -> None:
    """Write (C,H,W) or (H,W) floats in [0,1]; quantizes to 8 bits."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DataError(f"raster: expected (1|3,H,W) or (H,W) array, got {arr.shape}")
    channels, height, width = arr.shape
    quant = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(MAGIC + f" {width} {height} {channels}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(quant.transpose(1, 2, 0)).tobytes())
