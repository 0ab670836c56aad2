"""Binary PPM (P6) and PGM (P5) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Parse ``count`` whitespace-separated header integers, skipping comments.

    Returns the integers and the offset of the first payload byte.
    """
    vals = []
    i = 2
    n = len(buf)
    while len(vals) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and buf[i:i + 1].isdigit():
            i += 1
        if start == i:
            raise NetpbmError("malformed header")
        vals.append(int(buf[start:i]))
    if i >= n or not buf[i:i + 1].isspace():
        raise NetpbmError("malformed header: missing separator before payload")
    return vals, i + 1


def read_netpbm(path: str | Path) -> np.ndarray:
    """Return an (H, W) array for P5 or (H, W, 3) for P6, dtype uint8 or uint16."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: unsupported magic {magic!r}")
    (width, height, maxval), offset = _tokens(buf, 3)
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise NetpbmError(f"{path}: bad header values {width}x{height} max {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    payload = buf[offset:offset + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise NetpbmError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape), maxval


def write_netpbm(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise NetpbmError("only 8-bit images are written")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"cannot write array of shape {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(arr).tobytes())
