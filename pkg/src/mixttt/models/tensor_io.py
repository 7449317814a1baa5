"""
MTTT tensor file format
Named float64 tensors, little-endian, row-major.

Layout: magic b"MTTT", format version (u16), then per tensor:
name length (u16), UTF-8 name, dim count (u32), dims (u32 each),
float64 payload.
"""

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from ..utils.errors import FormatError

MAGIC = b"MTTT"
FORMAT_VERSION = 1

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize an ordered mapping of arrays into MTTT bytes"""
    chunks = [MAGIC, _U16.pack(FORMAT_VERSION)]
    for name, array in tensors.items():
        encoded_name = name.encode("utf-8")
        if len(encoded_name) > 0xFFFF:
            raise FormatError(f"Tensor name too long: {name[:40]}...")
        values = np.ascontiguousarray(np.asarray(array), dtype="<f8")
        chunks.append(_U16.pack(len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(_U32.pack(values.ndim))
        chunks.extend(_U32.pack(dim) for dim in values.shape)
        chunks.append(values.tobytes(order="C"))
    return b"".join(chunks)


def decode_tensors(payload: bytes) -> "OrderedDict[str, np.ndarray]":
    """Parse MTTT bytes back into float64 arrays, preserving order"""
    if len(payload) < len(MAGIC) + _U16.size:
        raise FormatError("File too short for an MTTT header")
    if payload[: len(MAGIC)] != MAGIC:
        raise FormatError(f"Bad magic bytes: {payload[:len(MAGIC)]!r}")

    offset = len(MAGIC)
    (version,) = _U16.unpack_from(payload, offset)
    offset += _U16.size
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported MTTT format version {version}")

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    total = len(payload)
    while offset < total:
        offset, name = _read_name(payload, offset)
        if offset + _U32.size > total:
            raise FormatError(f"Truncated dim count for tensor '{name}'")
        (ndim,) = _U32.unpack_from(payload, offset)
        offset += _U32.size
        if offset + ndim * _U32.size > total:
            raise FormatError(f"Truncated dims for tensor '{name}'")
        shape = tuple(_U32.unpack_from(payload, offset + i * _U32.size)[0] for i in range(ndim))
        offset += ndim * _U32.size

        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        nbytes = count * 8
        if offset + nbytes > total:
            raise FormatError(f"Truncated payload for tensor '{name}'")
        values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        offset += nbytes

        if name in tensors:
            raise FormatError(f"Duplicate tensor name '{name}'")
        tensors[name] = values.astype(np.float64).reshape(shape)
    return tensors


def _read_name(payload: bytes, offset: int):
    if offset + _U16.size > len(payload):
        raise FormatError("Truncated tensor name length")
    (length,) = _U16.unpack_from(payload, offset)
    offset += _U16.size
    if offset + length > len(payload):
        raise FormatError("Truncated tensor name")
    try:
        name = payload[offset : offset + length].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"Tensor name is not UTF-8: {e}") from e
    return offset + length, name


def save_tensors(tensors: Mapping[str, np.ndarray], path: Union[str, Path]) -> None:
    """Write tensors to an MTTT file"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_tensors(tensors))


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read every tensor of an MTTT file"""
    return decode_tensors(Path(path).read_bytes())
