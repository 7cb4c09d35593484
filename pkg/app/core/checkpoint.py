"""
Versioned binary container for named float64 arrays.

Layout (little endian):
    magic        8 bytes  b"MOTNCKPT"
    version      uint32
    meta_length  uint32, followed by that many bytes of UTF-8 JSON
    count        uint32
    count x { name_length uint16, name, rank uint8, dims uint32 x rank, payload f64 x prod(dims) }
"""

import io
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from app.core.errors import ParseError

logger = logging.getLogger(__name__)

MAGIC = b"MOTNCKPT"
SCHEMA_VERSION = 1


def dumps(arrays: Dict[str, np.ndarray], meta: Dict[str, Any] = None) -> bytes:
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack("<I", SCHEMA_VERSION))
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buffer.write(struct.pack("<I", len(meta_bytes)))
    buffer.write(meta_bytes)
    buffer.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        array = np.asarray(arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        buffer.write(struct.pack("<H", len(encoded)))
        buffer.write(encoded)
        buffer.write(struct.pack("<B", array.ndim))
        for dim in array.shape:
            buffer.write(struct.pack("<I", dim))
        buffer.write(np.ascontiguousarray(array).tobytes())
    return buffer.getvalue()


def loads(blob: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    view = memoryview(blob)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise ParseError(f"checkpoint truncated at byte {offset}")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise ParseError("not a checkpoint file (bad magic bytes)")
    (version,) = struct.unpack("<I", take(4))
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported checkpoint schema version {version}")
    (meta_length,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(bytes(take(meta_length)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"corrupt checkpoint metadata: {e}")
    (count,) = struct.unpack("<I", take(4))
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = struct.unpack("<H", take(2))
        name = bytes(take(name_length)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        payload = np.frombuffer(bytes(take(8 * size)), dtype="<f8")
        arrays[name] = payload.reshape(shape).astype(np.float64)
    return arrays, meta


def save(path: Union[str, Path], arrays: Dict[str, np.ndarray], meta: Dict[str, Any] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(arrays, meta))
    logger.info(f"Wrote checkpoint {path} ({len(arrays)} arrays)")
    return path


def load(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise ParseError(f"checkpoint not found: {path}")
    return loads(blob)
