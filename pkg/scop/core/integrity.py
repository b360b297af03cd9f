import hashlib
import json
import zlib
from typing import Any, Mapping

import numpy as np


def fingerprint_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, dtypes, shapes and little-endian bytes, in name order."""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        value = np.ascontiguousarray(arrays[name])
        little = value.astype(value.dtype.newbyteorder("<"), copy=False)
        digest.update(name.encode("utf-8"))
        digest.update(little.dtype.str.encode("ascii"))
        digest.update(repr(value.shape).encode("ascii"))
        digest.update(little.tobytes())
    return digest.hexdigest()


def fingerprint_json(payload: Any) -> str:
    """SHA-256 of a canonical JSON rendering (sorted keys, no whitespace)."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def crc32(payload: bytes) -> int:
    return zlib.crc32(payload) & 0xFFFFFFFF


def verify_crc32(payload: bytes, expected: int) -> bool:
    return crc32(payload) == expected
