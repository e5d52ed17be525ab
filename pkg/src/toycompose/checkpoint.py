"""Named-tensor checkpoint container.

Layout (little-endian)::

    magic     8 bytes  b"CONES2C\\0"
    version   u16
    manifest  u32 length + JSON
    count     u32
    blocks    count x [u16 name length, name, u8 dtype code, u8 ndim,
                       ndim x u32 dims, u64 byte length, raw bytes]
    crc32     u32 over every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"CONES2C\0"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|b1", 4: "<i4"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


def _to_numpy(t) -> np.ndarray:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    return np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False))


def encode_checkpoint(tensors: Mapping[str, object], manifest: Mapping) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    man = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    parts += [struct.pack("<I", len(man)), man, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = arr.tobytes()
        key = name.encode()
        parts += [
            struct.pack("<H", len(key)),
            key,
            struct.pack("<BB", code, arr.ndim),
            struct.pack(f"<{arr.ndim}I", *arr.shape),
            struct.pack("<Q", len(raw)),
            raw,
        ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise CheckpointError("checkpoint CRC mismatch")
    off = 8
    (version,) = struct.unpack_from("<H", data, off)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += 2
    (n,) = struct.unpack_from("<I", data, off)
    manifest = json.loads(data[off + 4 : off + 4 + n])
    off += 4 + n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        name = data[off + 2 : off + 2 + n].decode()
        off += 2 + n
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", data, off)
        off += 8
        arr = np.frombuffer(data, dtype=_DTYPES[code], count=nbytes // np.dtype(_DTYPES[code]).itemsize, offset=off)
        tensors[name] = torch.from_numpy(arr.reshape(shape).copy())
        off += nbytes
    return tensors, manifest


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, tensors: Mapping[str, object], manifest: Mapping) -> None:
    write_atomic(path, encode_checkpoint(tensors, manifest))


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    return decode_checkpoint(Path(path).read_bytes())


def state_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(_to_numpy(t).tobytes())
    return h.hexdigest()
