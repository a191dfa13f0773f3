"""Common binary file header shared by stores, indexes, and checkpoints.

Layout (little-endian, 36 bytes total):
  magic        4 bytes, ASCII "DECS"
  version      u32, currently 1
  record_count u64
  key_dim      u32  (embedding dimension e; 0 where not applicable)
  value_rows   u32  (encoding rows w; 0 where not applicable)
  value_cols   u32  (encoding cols d_model; 0 where not applicable)
  dtype        u8, 1 = float32 little-endian
  reserved     7 zero bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"DECS"
VERSION = 1
DTYPE_F32 = 1

_HEADER_STRUCT = struct.Struct("<4sIQIIIB7s")
HEADER_SIZE = _HEADER_STRUCT.size  # 36


class CorruptFileError(ValueError):
    """Raised when a binary file fails validation; message names the field."""


@dataclass(frozen=True)
class FileHeader:
    record_count: int
    key_dim: int = 0
    value_rows: int = 0
    value_cols: int = 0

    def pack(self) -> bytes:
        return _HEADER_STRUCT.pack(MAGIC, VERSION, self.record_count, self.key_dim,
                                   self.value_rows, self.value_cols, DTYPE_F32, b"\x00" * 7)

    @classmethod
    def unpack(cls, raw: bytes) -> "FileHeader":
        if len(raw) < HEADER_SIZE:
            raise CorruptFileError(f"header: file too short ({len(raw)} < {HEADER_SIZE} bytes)")
        magic, version, count, key_dim, rows, cols, dtype, reserved = \
            _HEADER_STRUCT.unpack(raw[:HEADER_SIZE])
        if magic != MAGIC:
            raise CorruptFileError(f"magic: expected {MAGIC!r}, found {magic!r}")
        if version != VERSION:
            raise CorruptFileError(f"version: expected {VERSION}, found {version}")
        if dtype != DTYPE_F32:
            raise CorruptFileError(f"dtype: expected {DTYPE_F32} (float32), found {dtype}")
        if reserved != b"\x00" * 7:
            raise CorruptFileError("reserved: nonzero reserved bytes")
        return cls(record_count=count, key_dim=key_dim, value_rows=rows, value_cols=cols)


def read_header(f) -> FileHeader:
    """Read and validate a header from an open binary file."""
    return FileHeader.unpack(f.read(HEADER_SIZE))


def save_tensor_file(path, meta: dict, arrays: dict) -> None:
    """Checkpoint layout: header, u32 manifest length, JSON manifest of
    {"meta", "tensors": [(name, shape, offset)]}, then a packed float32 blob.

    Tensors are written in sorted-name order; offsets are relative to the blob.
    """
    import json

    import numpy as np

    tensors = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
        blobs.append(a.tobytes())
    manifest = json.dumps({"meta": meta, "tensors": tensors}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(FileHeader(record_count=len(tensors)).pack())
        f.write(np.array([len(manifest)], dtype="<u4").tobytes())
        f.write(manifest)
        for b in blobs:
            f.write(b)


def load_tensor_file(path) -> tuple[dict, dict]:
    """Inverse of save_tensor_file: (meta, {name: float32 ndarray})."""
    import json

    import numpy as np

    with open(path, "rb") as f:
        header = read_header(f)
        (manifest_len,) = np.frombuffer(f.read(4), dtype="<u4")
        manifest = json.loads(f.read(int(manifest_len)).decode())
        blob = f.read()
    if len(manifest["tensors"]) != header.record_count:
        raise CorruptFileError("record_count: manifest tensor count mismatch")
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count,
                            offset=entry["offset"]).reshape(shape)
        arrays[entry["name"]] = arr.copy()
    return manifest["meta"], arrays
