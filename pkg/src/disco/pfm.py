"""Portable Float Map I/O for dense disparity maps.

Format: header line "Pf" (1 channel) or "PF" (3 channels), a line with
"width height", a scale line whose sign encodes endianness (negative =
little-endian), then 32-bit float rows stored bottom-to-top (interleaved
RGB for "PF"). In memory maps are (C,H,W), top-to-bottom. Parse errors name
the byte offset where the file went wrong.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def _read_token(buf: bytes, pos: int, what: str):
    """One whitespace-delimited header token; returns (token, next position)."""
    while pos < len(buf) and buf[pos : pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataError(f"PFM: missing {what} at byte {start}")
    return buf[start:pos], pos


def read_pfm(path: str):
    """Read a PFM file; returns ((C,H,W) float32 array, scale as stored)."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read PFM {path}: {exc}") from exc

    magic, pos = _read_token(buf, 0, "magic")
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise DataError(f"PFM: bad magic {magic!r} at byte 0 (expected 'PF' or 'Pf')")

    wtok, pos = _read_token(buf, pos, "width")
    htok, pos = _read_token(buf, pos, "height")
    stok, pos = _read_token(buf, pos, "scale")
    try:
        width, height = int(wtok), int(htok)
        scale = float(stok)
    except ValueError as exc:
        raise DataError(f"PFM: malformed header near byte {pos}: {exc}") from exc
    if width < 1 or height < 1:
        raise DataError(f"PFM: non-positive dimensions {width}x{height}")
    if scale == 0.0:
        raise DataError(f"PFM: zero scale at byte {pos - len(stok)}")
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(buf):
        raise DataError(f"PFM: truncated after header at byte {pos}")
    pos += 1

    count = width * height * channels
    need = count * 4
    have = len(buf) - pos
    if have < need:
        raise DataError(
            f"PFM: payload needs {need} bytes but only {have} remain at byte {pos}"
        )
    dt = np.dtype("<f4" if scale < 0 else ">f4")
    flat = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
    rows = flat.reshape(height, width, channels)
    data = rows[::-1].transpose(2, 0, 1)  # bottom-to-top file -> top-to-bottom memory
    return np.ascontiguousarray(data, dtype=np.float32), scale


def write_pfm(path: str, data: np.ndarray, scale: float = -1.0) -> None:
    """Write (C,H,W) or (H,W) float data; scale sign selects endianness."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DataError(f"PFM: expected (1|3,H,W) or (H,W) array, got {arr.shape}")
    if scale == 0.0:
        raise DataError("PFM: scale must be nonzero")
    channels, height, width = arr.shape
    magic = b"PF" if channels == 3 else b"Pf"
    rows = arr.transpose(1, 2, 0)[::-1]  # memory top-to-bottom -> file bottom-to-top
    payload = np.ascontiguousarray(rows, dtype="<f4" if scale < 0 else ">f4")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{width} {height}\n".encode("ascii"))
        fh.write(f"{scale:g}\n".encode("ascii"))
        fh.write(payload.tobytes())
