"""Binary checkpoint format.

Layout: magic "OBTS", u32 version, u64 meta-JSON length + bytes (config, extra
run state, config hash), u32 tensor count, then per tensor a u16-length-prefixed
UTF-8 name, u8 dtype tag, u8 rank, rank u64 dims and the f32 little-endian
payload; a CRC32 of everything before it closes the file. Writes are atomic
(temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .config import config_hash
from .errors import CheckpointError, CheckpointVersionError

MAGIC = b"OBTS"
VERSION = 1
DTYPE_F32 = 0


def save_checkpoint(
    path,
    config: dict,
    tensors: dict[str, np.ndarray],
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": config,
        "config_hash": config_hash(config),
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()

    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<Q", len(meta_bytes))
    buf += meta_bytes
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        name_bytes = name.encode()
        buf += struct.pack("<H", len(name_bytes))
        buf += name_bytes
        buf += struct.pack("<BB", DTYPE_F32, arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<Q", dim)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)

    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(buf)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Return (config, tensors, extra); validates magic, version and CRC."""
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise CheckpointError(f"{path}: file too small to be a checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} needs migration (expected {VERSION})"
        )
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"{path}: checksum mismatch (stored {stored_crc:#x}, actual {actual_crc:#x})"
        )

    offset = 8
    (meta_len,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    meta = json.loads(data[offset : offset + meta_len].decode())
    offset += meta_len
    (n_tensors,) = struct.unpack_from("<I", data, offset)
    offset += 4

    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + name_len].decode()
        offset += name_len
        dtype_tag, rank = struct.unpack_from("<BB", data, offset)
        offset += 2
        if dtype_tag != DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype tag {dtype_tag} for {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", data, offset) if rank else ()
        offset += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(dims)
        tensors[name] = arr.copy()
        offset += 4 * count

    return meta["config"], tensors, meta.get("extra", {})


def verify_config_hash(path, config: dict) -> bool:
    """True when the checkpoint at ``path`` was written with exactly ``config``."""
    stored_config, _, _ = load_checkpoint(path)
    return config_hash(stored_config) == config_hash(config)
