"""CAPCKPT1 binary checkpoint container.

Layout (all integers little-endian)::

    b"CAPCKPT1"  u32 version  u32 section_count
    section*:    u32 name_len  name(utf-8)  u8 kind  u64 payload_len  payload

Section kinds: 0 = JSON (utf-8, sorted keys, compact), 1 = tensor.
Tensor payload: u8 dtype  u32 ndim  u64 dim[ndim]  raw little-endian data.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CAPCKPT1"
VERSION = 1
KIND_JSON, KIND_TENSOR = 0, 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _encode_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _encode_tensor(t) -> bytes:
    a = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    dt = a.dtype.newbyteorder("<") if a.dtype.kind in "fi" else a.dtype
    if np.dtype(dt) not in _CODES:
        raise CheckpointError(f"unsupported dtype {a.dtype}")
    a = np.ascontiguousarray(a, dtype=dt)
    head = struct.pack("<BI", _CODES[np.dtype(dt)], a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def _decode_tensor(buf: bytes) -> torch.Tensor:
    code, ndim = struct.unpack_from("<BI", buf, 0)
    shape = struct.unpack_from(f"<{ndim}Q", buf, 5)
    off = 5 + 8 * ndim
    a = np.frombuffer(buf, dtype=_DTYPES[code], offset=off).reshape(shape)
    return torch.from_numpy(a.astype(a.dtype.newbyteorder("=")).copy())


def dumps(sections: dict) -> bytes:
    """Serialize an ordered mapping of name -> (JSON-able obj | tensor)."""
    out = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, value in sections.items():
        if torch.is_tensor(value) or isinstance(value, np.ndarray):
            kind, payload = KIND_TENSOR, _encode_tensor(value)
        else:
            kind, payload = KIND_JSON, _encode_json(value)
        nb = name.encode("utf-8")
        out += [struct.pack("<I", len(nb)), nb, struct.pack("<BQ", kind, len(payload)), payload]
    return b"".join(out)


def loads(data: bytes) -> dict:
    if data[:8] != MAGIC:
        raise CheckpointError("bad magic: not a CAPCKPT1 file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos, sections = 16, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        name = data[pos + 4: pos + 4 + n].decode("utf-8")
        pos += 4 + n
        kind, length = struct.unpack_from("<BQ", data, pos)
        pos += 9
        payload = data[pos: pos + length]
        if len(payload) != length:
            raise CheckpointError(f"truncated section {name!r}")
        pos += length
        sections[name] = json.loads(payload) if kind == KIND_JSON else _decode_tensor(payload)
    return sections


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def save(path: str | Path, sections: dict) -> None:
    atomic_write(path, dumps(sections))


def load(path: str | Path) -> dict:
    return loads(Path(path).read_bytes())
