import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwih.errors import FormatError, GeometryError, InputError
from dwih.hvol import HEADER_SIZE, decode, encode, read_hvol, write_hvol
from dwih.volume import Volume3D


def test_header_is_32_bytes():
    assert HEADER_SIZE == 32


def test_header_layout_bytes():
    vol = Volume3D(np.arange(6, dtype=np.float32).reshape(1, 2, 3), (0.5, 0.5, 3.0))
    blob = encode(vol)
    assert blob[:6] == b"HVOL1\x00"
    assert blob[6] == 0
    assert struct.unpack("<3I", blob[7:19]) == (3, 2, 1)
    assert struct.unpack("<3f", blob[19:31]) == (0.5, 0.5, 3.0)
    assert blob[31] == 0
    # x fastest: the payload is the C-order [z, y, x] array
    assert np.array_equal(np.frombuffer(blob[32:], "<f4"), np.arange(6, dtype=np.float32))


def test_full_size_volume_file_size(tmp_path):
    vol = Volume3D(np.zeros((30, 240, 240), np.float32), (0.5, 0.5, 3.0))
    write_hvol(tmp_path / "v.hvol", vol)
    assert (tmp_path / "v.hvol").stat().st_size == 32 + 4 * 1_728_000


def test_mask_roundtrip(tmp_path):
    data = np.array([[[0, 1, 2], [255, 0, 7]]], dtype=np.uint8)
    vol = Volume3D(data, (1.0, 2.0, 3.0))
    write_hvol(tmp_path / "m.hvol", vol)
    back = read_hvol(tmp_path / "m.hvol")
    assert back.data.dtype == np.uint8
    assert np.array_equal(back.data, data)
    assert encode(back) == encode(vol)


def test_mask_out_of_range_rejected():
    with pytest.raises(InputError):
        encode(Volume3D(np.array([[[300]]]), (1, 1, 1)))


def test_bad_magic():
    blob = bytearray(encode(Volume3D(np.ones((1, 1, 2), np.float32), (1, 1, 1))))
    blob[0] ^= 0xFF
    with pytest.raises(FormatError, match="magic"):
        decode(bytes(blob))


@pytest.mark.parametrize("cut", [0, 10, 31, 32, 35])
def test_truncated(cut):
    blob = encode(Volume3D(np.ones((1, 1, 2), np.float32), (1, 1, 1)))
    with pytest.raises(FormatError):
        decode(blob[:cut])


def test_trailing_bytes_rejected():
    blob = encode(Volume3D(np.ones((1, 1, 2), np.float32), (1, 1, 1)))
    with pytest.raises(FormatError):
        decode(blob + b"\x00")


def test_dims_overflow():
    header = struct.pack("<6sB3I3fx", b"HVOL1\x00", 0, 2**31, 2**31, 2, 1.0, 1.0, 1.0)
    with pytest.raises(FormatError, match="overflow"):
        decode(header)


def test_zero_dims_and_bad_dtype():
    with pytest.raises(FormatError):
        decode(struct.pack("<6sB3I3fx", b"HVOL1\x00", 0, 0, 1, 1, 1.0, 1.0, 1.0))
    with pytest.raises(FormatError):
        decode(struct.pack("<6sB3I3fx", b"HVOL1\x00", 9, 1, 1, 1, 1.0, 1.0, 1.0) + b"\x00")


def test_volume_validation():
    with pytest.raises(GeometryError):
        Volume3D(np.zeros((2, 2)), (1, 1, 1))
    with pytest.raises(InputError):
        Volume3D(np.zeros((1, 1, 1)), (1, 0, 1))


def test_volume_is_immutable_and_does_not_freeze_caller_array():
    arr = np.zeros((1, 2, 2))
    vol = Volume3D(arr, (1, 1, 1))
    arr[0, 0, 0] = 5.0
    assert vol.data[0, 0, 0] == 0.0
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1.0


spacing_st = st.floats(0.015625, 10.0, width=32)


@settings(max_examples=60, deadline=None)
@given(
    nx=st.integers(1, 6),
    ny=st.integers(1, 6),
    nz=st.integers(1, 4),
    sp=st.tuples(spacing_st, spacing_st, spacing_st),
    mask=st.booleans(),
    seed=st.integers(0, 2**32 - 1),
)
def test_roundtrip_property(tmp_path_factory, nx, ny, nz, sp, mask, seed):
    rng = np.random.default_rng(seed)
    if mask:
        data = rng.integers(0, 256, (nz, ny, nx), dtype=np.uint8)
    else:
        # include non-finite and signed-zero bit patterns
        data = rng.standard_normal((nz, ny, nx)).astype(np.float32)
        data.flat[0] = rng.choice([np.inf, -np.inf, np.nan, -0.0, data.flat[0]])
    vol = Volume3D(data, sp)
    path = tmp_path_factory.mktemp("h") / "v.hvol"
    write_hvol(path, vol)
    back = read_hvol(path)
    assert back.spacing == vol.spacing
    assert back.data.tobytes() == data.tobytes()
