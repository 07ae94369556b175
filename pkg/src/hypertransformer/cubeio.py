"""Binary cube container.

Layout (little-endian)::

    "HSI1" | dtype u8 (0 = f32, 1 = f64) | 3 reserved bytes | C, H, W as u32 | payload

The payload holds C*H*W scalars in band-major order.  A PAN image is stored
as a single-band cube.
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import FormatError
from .pipeline import HsiCube

MAGIC = b"HSI1"
HEADER = struct.Struct("<4sB3xIII")
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
MAX_ELEMENTS = 1 << 34


def encode_cube(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    if data.ndim != 3:
        raise FormatError(f"cube must be [C,H,W], got shape {data.shape}")
    code = CODES.get(data.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {data.dtype}; use float32 or float64")
    if max(data.shape) >= 1 << 32:
        raise FormatError(f"dimension overflow for u32 header: {data.shape}")
    c, h, w = data.shape
    header = HEADER.pack(MAGIC, code, c, h, w)
    return header + np.ascontiguousarray(data, dtype=DTYPES[code]).tobytes()


def decode_cube(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER.size} bytes", offset=len(buf))
    magic, code, c, h, w = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=4)
    count = c * h * w
    if c == 0 or h == 0 or w == 0 or count > MAX_ELEMENTS:
        raise FormatError(f"implausible dimensions {c}x{h}x{w}", offset=8)
    dtype = DTYPES[code]
    need = HEADER.size + count * dtype.itemsize
    if len(buf) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf)}", offset=len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload", offset=need)
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=HEADER.size)
    return arr.reshape(c, h, w).astype(dtype.newbyteorder("="))


def atomic_write(path, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_cube(path, cube) -> None:
    data = cube.data if isinstance(cube, HsiCube) else cube
    data = getattr(data, "data", data)  # PanImage
    atomic_write(path, encode_cube(np.asarray(data)))


def load_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return HsiCube(decode_cube(buf))
    except FormatError as exc:
        err = FormatError(f"{path}: {exc}")
        err.offset = exc.offset
        raise err from None
