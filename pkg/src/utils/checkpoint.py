"""Versioned binary container for run artifacts.

Layout (all integers little-endian):

    b"BSTL" | u16 version | u32 header length | JSON header | array bytes | sha256

The JSON header lists each array's name, dtype and shape in storage order
plus free-form metadata. The trailing 32-byte SHA-256 digest covers every
byte before it. Files are parsed and verified completely before any array is
returned, so a corrupt file never yields partial state.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from utils.errors import IntegrityError

logger = logging.getLogger(__name__)

MAGIC = b"BSTL"
FORMAT_VERSION = 1
DTYPE = "<f8"
_PREFIX = struct.Struct("<4sHI")
_DIGEST_SIZE = 32


def encode(arrays: Dict[str, np.ndarray], metadata: Dict[str, Any]) -> bytes:
    """Serialise float64 arrays and JSON metadata into container bytes."""
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=DTYPE)
        entries.append({"name": name, "dtype": DTYPE, "shape": list(data.shape)})
        payload += data.tobytes()
    header = json.dumps(
        {"arrays": entries, "metadata": metadata}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + bytes(payload)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Verify and parse container bytes."""
    if len(blob) < _PREFIX.size + _DIGEST_SIZE:
        raise IntegrityError(f"container truncated: {len(blob)} bytes")
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("container checksum mismatch")

    magic, version, header_len = _PREFIX.unpack_from(body, 0)
    if magic != MAGIC:
        raise IntegrityError(f"bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported container version {version}")
    start = _PREFIX.size
    if start + header_len > len(body):
        raise IntegrityError("container header truncated")
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"container header unreadable: {e}") from e

    offset = start + header_len
    arrays: Dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        if entry.get("dtype") != DTYPE:
            raise IntegrityError(f"unsupported dtype {entry.get('dtype')!r} for {entry.get('name')}")
        shape = tuple(int(s) for s in entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + size > len(body):
            raise IntegrityError(f"array {entry['name']} truncated")
        arrays[entry["name"]] = np.frombuffer(body, dtype=DTYPE, count=size // 8, offset=offset).reshape(shape).copy()
        offset += size
    if offset != len(body):
        raise IntegrityError(f"{len(body) - offset} unexpected trailing byte(s)")
    return arrays, header.get("metadata", {})


def write_container(path: str, arrays: Dict[str, np.ndarray], metadata: Dict[str, Any]) -> None:
    blob = encode(arrays, metadata)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(blob)
    logger.info(f"Wrote {len(arrays)} array(s), {len(blob)} bytes to {path}")


def read_container(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise IntegrityError(f"cannot read container {path}: {e}") from e
    return decode(blob)
