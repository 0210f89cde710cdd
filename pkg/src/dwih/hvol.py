"""HVOL: a minimal little-endian binary volume format.

Layout (32-byte header, then raw voxels, x fastest)::

    offset  size  field
    0       6     magic b"HVOL1\\0"
    6       1     dtype: 0 = float32, 1 = uint8 mask
    7       12    dims  (nx, ny, nz) as uint32
    19      12    spacing (sx, sy, sz) as float32, mm
    31      1     reserved, zero
    32      ...   payload, nx*ny*nz voxels
"""

from __future__ import annotations

import os
import struct

import numpy as np

from dwih.errors import FormatError, InputError
from dwih.volume import Volume3D

MAGIC = b"HVOL1\x00"
HEADER = struct.Struct("<6sB3I3fx")
HEADER_SIZE = HEADER.size  # 32

DTYPE_FLOAT32 = 0
DTYPE_MASK = 1
_NUMPY_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_MASK: np.dtype("u1")}

# guards against headers that claim absurd payloads before we try to read them
MAX_VOXELS = 2**31


def encode(vol: Volume3D) -> bytes:
    if vol.is_mask:
        data = vol.data
        if data.size and (data.min() < 0 or data.max() > 255):
            raise InputError("mask values must fit in 0..255 for HVOL")
        code = DTYPE_MASK
    else:
        code = DTYPE_FLOAT32
    payload = np.ascontiguousarray(vol.data, dtype=_NUMPY_DTYPES[code]).tobytes()
    return HEADER.pack(MAGIC, code, *vol.dims, *vol.spacing) + payload


def decode(buf: bytes) -> Volume3D:
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(buf)} bytes")
    magic, code, nx, ny, nz, sx, sy, sz = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if code not in _NUMPY_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if buf[HEADER_SIZE - 1] != 0:
        raise FormatError("reserved header byte is not zero")
    if min(nx, ny, nz) < 1:
        raise FormatError(f"zero-sized dims {(nx, ny, nz)}")
    count = nx * ny * nz
    if count > MAX_VOXELS:
        raise FormatError(f"dims {(nx, ny, nz)} overflow the voxel limit")
    dtype = _NUMPY_DTYPES[code]
    expected = HEADER_SIZE + count * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"payload size mismatch: file has {len(buf)} bytes, header implies {expected}")
    spacing = (sx, sy, sz)
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"invalid spacing {spacing}")
    data = np.frombuffer(buf, dtype=dtype, offset=HEADER_SIZE, count=count)
    data = data.reshape(nz, ny, nx).astype(dtype.newbyteorder("="))
    return Volume3D(data, spacing)


def write_hvol(path, vol: Volume3D) -> None:
    """Write ``vol``; float volumes are stored as float32, masks as uint8."""
    blob = encode(vol)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_hvol(path) -> Volume3D:
    with open(path, "rb") as fh:
        return decode(fh.read())
