"""
Flat binary container mapping path strings to 64-bit arrays.

Layout (all integers little-endian, see docs/formats.md):

    magic      8 bytes  b"RIDCKPT1"
    count      uint32
    count x {
        name_len  uint32
        name      name_len bytes, UTF-8
        ndim      uint32
        dims      ndim x uint64
        data      prod(dims) x float64 little-endian, row-major
    }
"""

import logging
import os
import struct
from typing import Dict, Mapping

import numpy as np

from src.errors import IngestError

logger = logging.getLogger(__name__)

MAGIC = b"RIDCKPT1"
_LE_F64 = np.dtype("<f8")


def encode_container(arrays: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        value = np.ascontiguousarray(np.asarray(arrays[name], dtype=_LE_F64))
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.tobytes(order="C"))
    return b"".join(chunks)


def decode_container(blob: bytes, source: str = "<memory>") -> Dict[str, np.ndarray]:
    if blob[:len(MAGIC)] != MAGIC:
        raise IngestError(f"{source}: not a checkpoint container (bad magic)")
    offset = len(MAGIC)

    def read(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise IngestError(f"{source}: truncated container at offset {offset}")
        values = struct.unpack_from(fmt, blob, offset)
        offset += size
        return values

    arrays: Dict[str, np.ndarray] = {}
    (count,) = read("<I")
    for _ in range(count):
        (name_len,) = read("<I")
        if offset + name_len > len(blob):
            raise IngestError(f"{source}: truncated name at offset {offset}")
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = read("<I")
        dims = read(f"<{ndim}Q") if ndim else ()
        n_bytes = int(np.prod(dims, dtype=np.int64)) * 8
        if offset + n_bytes > len(blob):
            raise IngestError(f"{source}: truncated data for '{name}' at offset {offset}")
        if n_bytes == 0:
            arrays[name] = np.zeros(dims)
        else:
            arrays[name] = np.frombuffer(blob, dtype=_LE_F64, count=n_bytes // 8,
                                         offset=offset).astype(np.float64).reshape(dims)
        offset += n_bytes
    return arrays


def save_container(path: str, arrays: Mapping[str, np.ndarray]) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_container(arrays))
    logger.debug(f"Wrote {len(arrays)} arrays to {path}")


def load_container(path: str) -> Dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise IngestError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return decode_container(f.read(), source=path)
