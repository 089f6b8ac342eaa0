import struct
import zlib

import numpy as np
import pytest

from lionlora.errors import (
    ChecksumError,
    MagicError,
    TruncatedFileError,
    VersionError,
    WeightFileError,
)
from lionlora.weightfile import MAGIC, Section, decode, encode, read_weight_file, write_weight_file


def sample_sections():
    rng = np.random.default_rng(0)
    return [
        Section("model", {"w": rng.normal(size=(3, 4)).astype(np.float32),
                          "b": rng.normal(size=4)}, {"note": "x", "n": 3}),
        Section("scaling/a", {"P": np.arange(6, dtype=np.float64).reshape(2, 3)}, {}),
    ]


def test_layout_magic_and_length():
    blob = encode(sample_sections())
    assert blob[:8] == b"LIONWT01" == MAGIC
    (hlen,) = struct.unpack("<I", blob[8:12])
    assert blob[12:12 + hlen].startswith(b"{")
    (crc,) = struct.unpack("<I", blob[-4:])
    assert crc == zlib.crc32(blob[12:-4])


def test_roundtrip_is_identity(tmp_path):
    secs = sample_sections()
    path = tmp_path / "a.lw"
    write_weight_file(path, secs)
    back = read_weight_file(path)
    assert list(back) == ["model", "scaling/a"]
    for sec in secs:
        got = back[sec.name]
        assert got.meta == sec.meta
        for k, v in sec.tensors.items():
            assert got.tensors[k].dtype == v.dtype
            assert np.array_equal(got.tensors[k], v)
            assert got.tensors[k].tobytes() == v.tobytes()


def test_encoding_is_deterministic():
    assert encode(sample_sections()) == encode(sample_sections())


def test_no_temp_file_left(tmp_path):
    write_weight_file(tmp_path / "a.lw", sample_sections())
    assert [p.name for p in tmp_path.iterdir()] == ["a.lw"]


def test_bad_magic():
    blob = bytearray(encode(sample_sections()))
    blob[0:6] = b"NOTLIO"
    with pytest.raises(MagicError):
        decode(bytes(blob))


def test_bad_version():
    blob = bytearray(encode(sample_sections()))
    blob[6:8] = b"02"
    with pytest.raises(VersionError):
        decode(bytes(blob))


def test_truncated_inside_header():
    blob = encode(sample_sections())
    with pytest.raises(TruncatedFileError):
        decode(blob[:20])
    with pytest.raises(TruncatedFileError):
        decode(blob[:10])


@pytest.mark.parametrize("where", ["header", "payload", "crc"])
def test_corruption_is_a_checksum_error(where):
    blob = bytearray(encode(sample_sections()))
    (hlen,) = struct.unpack("<I", blob[8:12])
    pos = {"header": 14, "payload": 12 + hlen + 5, "crc": len(blob) - 1}[where]
    blob[pos] ^= 0x20
    with pytest.raises(ChecksumError):
        decode(bytes(blob))


def test_failed_read_leaves_no_partial_state(tmp_path):
    path = tmp_path / "a.lw"
    write_weight_file(path, sample_sections())
    data = bytearray(path.read_bytes())
    data[-10] ^= 0xFF
    path.write_bytes(bytes(data))
    result = None
    with pytest.raises(ChecksumError):
        result = read_weight_file(path)
    assert result is None


def test_errors_share_a_base():
    for cls in (MagicError, VersionError, TruncatedFileError, ChecksumError):
        assert issubclass(cls, WeightFileError)


def test_rejects_integer_tensors():
    with pytest.raises(WeightFileError):
        encode([Section("x", {"i": np.arange(3)})])


def test_duplicate_sections_rejected():
    with pytest.raises(WeightFileError):
        encode([Section("x"), Section("x")])
