"""Binary checkpoint container.

Layout: magic ``CRE1``, a little-endian u32 byte length, a UTF-8 JSON
header, then a flat sequence of records. Each record is
``u32 name_len | name bytes | u32 rank | u32*rank shape | f32*count payload``
with all integers and floats little-endian. Payloads are written as float32
verbatim, so save -> load round-trips bit-exactly.

Writes go through a temp file + rename so an on-disk checkpoint is always
either the old or the new one, never a torn write.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"CRE1"


class CheckpointError(Exception):
    pass


def save_records(path, config: dict, records) -> None:
    """Write ``records`` (iterable of (name, float32 ndarray)) atomically."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    header = json.dumps(config, sort_keys=True).encode("utf-8")
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for name, value in records:
                arr = np.ascontiguousarray(value, dtype="<f4")
                name_bytes = name.encode("utf-8")
                f.write(struct.pack("<I", len(name_bytes)))
                f.write(name_bytes)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.tobytes())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_records(path):
    """Read a checkpoint; returns (config dict, ordered name -> ndarray)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (header_len,) = struct.unpack_from("<I", blob, 4)
    offset = 8
    try:
        config = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    offset += header_len
    records: dict[str, np.ndarray] = {}
    while offset < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
            offset += 4 * count
        except (struct.error, ValueError) as e:
            raise CheckpointError(f"{path}: truncated or corrupt record at byte {offset}") from e
        records[name] = arr.copy()
    return config, records
