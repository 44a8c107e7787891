"""Binary tensor container (``S2KD``) and checkpoint (``S2KC``) encodings.

Tensor container layout, all little-endian::

    b"S2KD" | version u8 (=1) | dtype u8 (1=f32, 2=f64) | rank u8 | rank x u32 dims | payload

Checkpoint layout::

    b"S2KC" | version u8 (=1) | entry count u32
    per entry: name length u16 | UTF-8 name | tensor container
    crc32 u32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError

TENSOR_MAGIC = b"S2KD"
CHECKPOINT_MAGIC = b"S2KC"
VERSION = 1

_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def encode_array(array) -> bytes:
    array = np.asarray(array)
    code = _DTYPE_TO_CODE.get(array.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {array.dtype}; expected float32 or float64", 5)
    if array.ndim > 255:
        raise FormatError(f"rank {array.ndim} does not fit in one byte", 6)
    header = TENSOR_MAGIC + struct.pack("<BBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_CODE_TO_DTYPE[code]).tobytes()
    return header + payload


def decode_array(buf, offset: int = 0, expect_dtype=None, expect_rank=None):
    """Decode one container starting at ``offset``; returns ``(array, end_offset)``."""
    buf = memoryview(buf)
    if len(buf) - offset < 7:
        raise FormatError("truncated tensor header", offset)
    if bytes(buf[offset:offset + 4]) != TENSOR_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}, expected {TENSOR_MAGIC!r}", offset)
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", offset + 4)
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code}", offset + 5)
    dtype = _CODE_TO_DTYPE[code]
    if expect_dtype is not None and np.dtype(expect_dtype) != dtype:
        raise FormatError(f"dtype mismatch: file has {dtype}, expected {np.dtype(expect_dtype)}", offset + 5)
    if expect_rank is not None and rank != expect_rank:
        raise FormatError(f"rank mismatch: file has rank {rank}, expected {expect_rank}", offset + 6)
    pos = offset + 7
    if len(buf) - pos < 4 * rank:
        raise FormatError(f"truncated shape: rank {rank} needs {4 * rank} bytes", pos)
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = count * dtype.itemsize
    available = len(buf) - pos
    if available < nbytes:
        have = available // dtype.itemsize
        raise FormatError(
            f"truncated payload: shape {'x'.join(map(str, shape))} expects {count} values, found {have}",
            pos,
        )
    array = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
    return array, pos + nbytes


def save_array(path, array) -> None:
    Path(path).write_bytes(encode_array(array))


def load_array(path, expect_dtype=None, expect_rank=None) -> np.ndarray:
    buf = Path(path).read_bytes()
    array, end = decode_array(buf, 0, expect_dtype, expect_rank)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", end)
    return array


def encode_checkpoint(entries) -> bytes:
    entries = OrderedDict(entries)
    out = bytearray(CHECKPOINT_MAGIC + struct.pack("<BI", VERSION, len(entries)))
    for name, array in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"parameter name too long: {name[:40]}...", len(out))
        out += struct.pack("<H", len(raw)) + raw
        out += encode_array(array)
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def decode_checkpoint(buf) -> "OrderedDict[str, np.ndarray]":
    buf = bytes(buf)
    if len(buf) < 13:
        raise FormatError("truncated checkpoint", 0)
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    body_end = len(buf) - 4
    (stored,) = struct.unpack_from("<I", buf, body_end)
    actual = zlib.crc32(buf[:body_end]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"checksum mismatch: stored {stored:08x}, computed {actual:08x}", body_end)
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    body = memoryview(buf)[:body_end]
    pos = 9
    entries = OrderedDict()
    for _ in range(count):
        if body_end - pos < 2:
            raise FormatError("truncated entry header", pos)
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        if body_end - pos < nlen:
            raise FormatError("truncated parameter name", pos)
        try:
            name = bytes(body[pos:pos + nlen]).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not valid UTF-8", pos) from None
        pos += nlen
        if name in entries:
            raise FormatError(f"duplicate parameter name {name!r}", pos - nlen)
        entries[name], pos = decode_array(body, pos)
    if pos != body_end:
        raise FormatError(f"{body_end - pos} unexpected bytes before checksum", pos)
    return entries


def save_checkpoint(path, entries) -> None:
    Path(path).write_bytes(encode_checkpoint(entries))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes())
