"""SCOPCKPT container and the objects stored in it.

Layout (all integers little-endian)::

    magic "SCOPCKPT" | u32 version | u32 section count
    per section:
        u32 name length | name (utf-8) | u8 dtype tag | u32 rank | u32 dims[rank]
        payload (little-endian) | u32 CRC32 of everything above in this section
"""

import json
import math
import os
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from ..core.exceptions import BadMagicError, BadVersionError, ChecksumError, FormatError, TruncatedFileError
from ..core.integrity import crc32, verify_crc32
from ..models.layers import LayerKind, LayerSpec
from ..models.network import NetworkSpec

MAGIC = b"SCOPCKPT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
TAGS = {dtype: tag for tag, dtype in DTYPES.items()}

NETWORK_SECTION = "network.json"
SELECTION_PREFIX = "SELSTATE"


def _tag_for(array: np.ndarray) -> int:
    dtype = array.dtype.newbyteorder("<") if array.dtype.itemsize > 1 else array.dtype
    if dtype not in TAGS:
        raise FormatError(f"dtype {array.dtype} cannot be stored in a checkpoint")
    return TAGS[dtype]


def encode_checkpoint(sections: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, value in sections.items():
        array = np.asarray(value)
        tag = _tag_for(array)
        encoded = name.encode("utf-8")
        body = b"".join([
            struct.pack("<I", len(encoded)),
            encoded,
            struct.pack("<BI", tag, array.ndim),
            struct.pack(f"<{array.ndim}I", *array.shape),
            np.ascontiguousarray(array, dtype=DTYPES[tag]).tobytes(),
        ])
        chunks += [body, struct.pack("<I", crc32(body))]
    return b"".join(chunks)


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if count < 0 or end > len(self.payload):
            raise TruncatedFileError(
                f"{self.source}: truncated while reading {what} (need {count} bytes at offset {self.offset})"
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(payload: bytes, source: str = "checkpoint") -> Dict[str, np.ndarray]:
    reader = _Reader(payload, source)
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise BadMagicError(f"{source}: expected magic {MAGIC!r}, found {magic!r}")
    version, count = reader.unpack("<II", "header")
    if version != VERSION:
        raise BadVersionError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")

    sections: Dict[str, np.ndarray] = {}
    for index in range(count):
        start = reader.offset
        (name_len,) = reader.unpack("<I", f"section {index} name length")
        raw_name = reader.take(name_len, f"section {index} name")
        tag, rank = reader.unpack("<BI", f"section {index} dtype/rank")
        dims = reader.unpack(f"<{rank}I", f"section {index} dims") if rank <= 32 else None
        if dims is None:
            raise FormatError(f"{source}: section {index} declares rank {rank}")
        if tag not in DTYPES:
            raise FormatError(f"{source}: section {index} has unknown dtype tag {tag}")
        dtype = DTYPES[tag]
        data = reader.take(math.prod(dims) * dtype.itemsize, f"section {index} payload")
        body = payload[start:reader.offset]
        (expected,) = reader.unpack("<I", f"section {index} checksum")
        if not verify_crc32(body, expected):
            raise ChecksumError(f"{source}: CRC32 mismatch in section {index}")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{source}: section {index} name is not valid utf-8") from None
        if name in sections:
            raise FormatError(f"{source}: duplicate section {name!r}")
        sections[name] = np.frombuffer(data, dtype=dtype).reshape(dims).copy()
    if reader.offset != len(payload):
        raise FormatError(f"{source}: {len(payload) - reader.offset} trailing bytes after the last section")
    return sections


def save_checkpoint(path: Path, sections: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(sections))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Path) -> Dict[str, np.ndarray]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), path.name)


# -- typed sections -----------------------------------------------------------

def json_section(payload: Any) -> np.ndarray:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def section_json(section: np.ndarray) -> Any:
    try:
        return json.loads(np.asarray(section, dtype=np.uint8).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"section is not valid JSON ({exc})") from None


def _describe(layer: LayerSpec) -> Dict[str, Any]:
    return {
        "kind": layer.kind.value,
        "kernel_size": layer.kernel_size,
        "stride": layer.stride,
        "padding": layer.padding,
        "activation": layer.activation,
        "skip_from": layer.skip_from,
        "prunable": layer.prunable,
        "momentum": layer.momentum,
        "eps": layer.eps,
        "params": sorted(layer.params),
        "buffers": sorted(layer.buffers),
        "shortcut": [_describe(sc) for sc in layer.shortcut],
    }


def _rebuild(desc: Mapping[str, Any], prefix: str, sections: Mapping[str, np.ndarray]) -> LayerSpec:
    def arrays(kind: str) -> Dict[str, np.ndarray]:
        out = {}
        for key in desc[kind]:
            name = f"{kind[:-1]}:{prefix}.{key}"
            if name not in sections:
                raise FormatError(f"checkpoint is missing section {name!r}")
            out[key] = sections[name].astype(np.float64)
        return out

    try:
        return LayerSpec(
            kind=LayerKind(desc["kind"]),
            params=arrays("params"),
            buffers=arrays("buffers"),
            kernel_size=int(desc["kernel_size"]),
            stride=int(desc["stride"]),
            padding=int(desc["padding"]),
            activation=str(desc["activation"]),
            skip_from=desc["skip_from"],
            shortcut=tuple(_rebuild(sc, f"{prefix}.shortcut.{j}", sections)
                           for j, sc in enumerate(desc["shortcut"])),
            prunable=bool(desc["prunable"]),
            momentum=float(desc["momentum"]),
            eps=float(desc["eps"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"layer {prefix} description is malformed ({exc})") from None


def network_sections(net: NetworkSpec) -> Dict[str, np.ndarray]:
    """Structure as JSON plus one float64 section per parameter and buffer."""
    sections = {NETWORK_SECTION: json_section({
        "name": net.name,
        "input_shape": list(net.input_shape),
        "layers": [_describe(layer) for layer in net.layers],
    })}
    sections.update({f"param:{k}": v for k, v in net.parameters().items()})
    sections.update({f"buffer:{k}": v for k, v in net.buffers().items()})
    return sections


def network_from_sections(sections: Mapping[str, np.ndarray]) -> NetworkSpec:
    if NETWORK_SECTION not in sections:
        raise FormatError(f"checkpoint has no {NETWORK_SECTION!r} section")
    desc = section_json(sections[NETWORK_SECTION])
    try:
        layers = tuple(_rebuild(layer, str(i), sections) for i, layer in enumerate(desc["layers"]))
        return NetworkSpec(layers=layers, input_shape=tuple(desc["input_shape"]), name=desc["name"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"network description is malformed ({exc})") from None


def save_network(path: Path, net: NetworkSpec, **meta: Any) -> Path:
    sections = network_sections(net)
    if meta:
        sections["meta.json"] = json_section(meta)
    return save_checkpoint(path, sections)


def load_network(path: Path) -> Tuple[NetworkSpec, Dict[str, Any]]:
    sections = load_checkpoint(path)
    meta = section_json(sections["meta.json"]) if "meta.json" in sections else {}
    return network_from_sections(sections), meta
