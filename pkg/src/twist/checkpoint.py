"""Little-endian checkpoint container.

Layout::

    b"TWST" | u32 version | u32 header_len | header (UTF-8 JSON, sorted keys)
    | u32 n_records | records...

    record: u16 name_len | name | u8 dtype | u8 ndim | ndim x u64 shape | raw data

The header holds ``{"config": ModelConfig, "meta": {...}}``. Only float32
(dtype code 0) is written. Writing a loaded checkpoint reproduces it byte for byte.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import ParameterStore
from .tensor import Tensor

MAGIC = b"TWST"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


class CheckpointFormatError(ValueError):
    pass


def dumps(params: ParameterStore, meta: dict | None = None) -> bytes:
    header = json.dumps({"config": params.config.to_dict(), "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", 0, t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[ParameterStore, dict]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointFormatError("not a TWST checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 12
    header = json.loads(bytes(view[pos:pos + header_len]).decode("utf-8"))
    pos += header_len
    (n,) = struct.unpack_from("<I", view, pos)
    pos += 4
    tensors = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", view, pos)
        pos += 2
        if code not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code} for {name!r}")
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(view, dtype=_DTYPES[code], count=count, offset=pos).reshape(shape)
        pos += 4 * count
        tensors[name] = Tensor(data.astype(np.float32), requires_grad=True)
    if pos != len(blob):
        raise CheckpointFormatError("trailing bytes after last record")
    return ParameterStore(ModelConfig.from_dict(header["config"]), tensors), header.get("meta", {})


def save(params: ParameterStore, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params, meta))
    return path


def load(path) -> tuple[ParameterStore, dict]:
    return loads(Path(path).read_bytes())
