"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"LCMT" | u32 version | u32 meta_len | meta JSON | u32 crc32(meta)
    then per tensor:
    u16 name_len | name | u8 dtype tag | u8 ndim | u32 dims... | payload | u32 crc32(record)

The record CRC covers every byte of the record before it. Loading reads and
checks the whole file before building any tensor, so a damaged file never
yields a partial parameter set.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError
from .model import ModelConfig, schema_diff
from .tensor import Tensor

MAGIC = b"LCMT"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode_checkpoint(params: Mapping[str, Tensor], config: ModelConfig, meta: Optional[dict] = None) -> bytes:
    body = {"config": config.to_dict(), "n_tensors": len(params), **(meta or {})}
    meta_bytes = json.dumps(body, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC + _u32(VERSION) + _u32(len(meta_bytes)) + meta_bytes + _u32(zlib.crc32(meta_bytes)))
    for name in sorted(params):
        arr = np.asarray(params[name].data)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in DTYPE_TAGS:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        rec = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", DTYPE_TAGS[dtype], arr.ndim)
        rec += b"".join(_u32(d) for d in arr.shape)
        rec += np.ascontiguousarray(arr, dtype=dtype).tobytes()
        out.write(rec + _u32(zlib.crc32(rec)))
    return out.getvalue()


def save_checkpoint(path, params: Mapping[str, Tensor], config: ModelConfig, meta: Optional[dict] = None) -> None:
    """Write atomically: the file appears only once fully written."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(params, config, meta))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> tuple:
    """Parse checkpoint bytes into ``(arrays, config, meta)``."""
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic bytes)")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    (meta_len,) = r.unpack("<I")
    meta_bytes = r.take(meta_len)
    (crc,) = r.unpack("<I")
    if zlib.crc32(meta_bytes) != crc:
        raise CorruptionError("checkpoint metadata CRC mismatch")
    meta = json.loads(meta_bytes)
    arrays = {}
    for _ in range(meta["n_tensors"]):
        start = r.pos
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag not in TAG_DTYPES:
            raise CorruptionError(f"tensor {name!r} has unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dtype = TAG_DTYPES[tag]
        payload = r.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        record = data[start : r.pos]
        (crc,) = r.unpack("<I")
        if zlib.crc32(record) != crc:
            raise CorruptionError(f"CRC mismatch in tensor record {name!r}")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if r.pos != len(data):
        raise CorruptionError(f"{len(data) - r.pos} trailing bytes after the last tensor record")
    return arrays, ModelConfig.from_dict(meta["config"]), meta


def load_checkpoint(path, expect_memory: Optional[bool] = None) -> tuple:
    """Load ``(params, config, meta)``.

    The stored tensor names must match the stored config's schema exactly.
    ``expect_memory`` rejects a checkpoint whose memory sublayer presence
    differs, naming the tensors that would be missing or unused.
    """
    arrays, config, meta = decode_checkpoint(Path(path).read_bytes())
    missing, extra = schema_diff(config, arrays)
    if missing or extra:
        raise ConfigError(f"checkpoint tensors do not match its config: missing {missing}, extra {extra}")
    if expect_memory is not None and expect_memory != config.has_memory:
        other = ModelConfig.from_dict({**config.to_dict(), "memory_block": None if config.has_memory else 1})
        missing, extra = schema_diff(other, arrays)
        want = "with" if expect_memory else "without"
        raise ConfigError(
            f"expected a checkpoint {want} a memory sublayer; missing tensors {missing}, extra tensors {extra}"
        )
    params = {name: Tensor(a, requires_grad=True, name=name, dtype=a.dtype) for name, a in arrays.items()}
    return params, config, meta
