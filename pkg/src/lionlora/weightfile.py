"""The LIONWT container: named sections of little-endian tensors plus JSON metadata.

Layout::

    b"LIONWT01"            8-byte magic, last two bytes are the version
    u32 (LE)               header length in bytes
    header                 UTF-8 JSON, see below
    payload                raw little-endian tensor bytes
    u32 (LE)               CRC32 of header + payload

The header is ``{"format": "LIONWT", "version": 1, "sections": [...]}`` where each
section is ``{"name", "meta", "tensors": [{"name", "shape", "dtype",
"byte_offset", "byte_len"}]}`` and offsets are relative to the payload start.
Files are written deterministically: same content, same bytes.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    MagicError,
    TruncatedFileError,
    VersionError,
    WeightFileError,
)

MAGIC_PREFIX = b"LIONWT"
VERSION = 1
MAGIC = MAGIC_PREFIX + b"%02d" % VERSION
_LE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class Section:
    name: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _dtype_name(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise WeightFileError(f"unsupported dtype {arr.dtype}")


def encode(sections: list[Section]) -> bytes:
    names = [s.name for s in sections]
    if len(set(names)) != len(names):
        raise WeightFileError(f"duplicate section names: {names}")
    entries = []
    chunks = []
    offset = 0
    for sec in sections:
        tensors = []
        for name, arr in sec.tensors.items():
            arr = np.asarray(arr)
            dt = _dtype_name(arr)
            raw = np.ascontiguousarray(arr, dtype=_LE[dt]).tobytes()
            tensors.append({"name": name, "shape": list(arr.shape), "dtype": dt,
                            "byte_offset": offset, "byte_len": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        entries.append({"name": sec.name, "meta": sec.meta, "tensors": tensors})
    header = json.dumps({"format": "LIONWT", "version": VERSION, "sections": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    crc = zlib.crc32(payload, zlib.crc32(header))
    return MAGIC + struct.pack("<I", len(header)) + header + payload + struct.pack("<I", crc)


def decode(blob: bytes) -> dict[str, Section]:
    if len(blob) < 8 or blob[:6] != MAGIC_PREFIX:
        raise MagicError("not a LIONWT file (bad magic)")
    if blob[:8] != MAGIC:
        raise VersionError(f"unsupported LIONWT version {blob[6:8]!r}")
    if len(blob) < 12:
        raise TruncatedFileError("file ends inside the header length field")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen + 4:
        raise TruncatedFileError(f"file too short for a {hlen}-byte header")
    header = blob[12:12 + hlen]
    payload = blob[12 + hlen:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload, zlib.crc32(header)) != crc:
        raise ChecksumError("CRC32 mismatch; file is corrupted")
    try:
        doc = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"malformed header: {exc}") from exc
    if doc.get("version") != VERSION:
        raise VersionError(f"header declares version {doc.get('version')}")
    out: dict[str, Section] = {}
    for entry in doc["sections"]:
        sec = Section(entry["name"], meta=entry.get("meta", {}))
        for t in entry["tensors"]:
            dt = _LE.get(t["dtype"])
            if dt is None:
                raise WeightFileError(f"unknown dtype {t['dtype']!r}")
            start, length = t["byte_offset"], t["byte_len"]
            count = int(np.prod(t["shape"], dtype=np.int64))
            if length != count * dt.itemsize:
                raise WeightFileError(f"tensor {t['name']!r}: byte_len disagrees with shape")
            if start < 0 or start + length > len(payload):
                raise TruncatedFileError(f"tensor {t['name']!r} extends past the payload")
            arr = np.frombuffer(payload, dtype=dt, count=count, offset=start)
            sec.tensors[t["name"]] = arr.reshape(t["shape"]).astype(dt.newbyteorder("="))
        out[sec.name] = sec
    return out


def write_weight_file(path, sections: list[Section]) -> None:
    blob = encode(sections)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_weight_file(path) -> dict[str, Section]:
    return decode(Path(path).read_bytes())
