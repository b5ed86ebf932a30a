"""Binary checkpoint format.

Layout (little-endian)::

    b"AUNT"                      magic
    u32                          format version
    u32 n, n bytes               config block (UTF-8 JSON, sorted keys)
    u32                          tensor count
    per tensor:
        u16 n, n bytes           name (UTF-8)
        u8                       dtype code (1 = float32)
        u8                       rank
        rank * u32               extents
        u64                      absolute byte offset of the payload
    payloads                     raw float32 data in directory order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

MAGIC = b"AUNT"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def encode(config: dict, tensors: Dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    entries = []
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        entries.append((raw, arr.shape, np.ascontiguousarray(arr, dtype="<f4").tobytes()))

    header_len = 4 + 4 + 4 + len(cfg) + 4
    header_len += sum(2 + len(raw) + 1 + 1 + 4 * len(shape) + 8 for raw, shape, _ in entries)
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(entries))]
    offset = header_len
    for raw, shape, payload in entries:
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", 1, len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(struct.pack("<Q", offset))
        offset += len(payload)
    parts.extend(payload for _, _, payload in entries)
    return b"".join(parts)


def decode(blob: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        pos = 8
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        config = json.loads(blob[pos : pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            if code not in DTYPE_CODES:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            dt = DTYPE_CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if offset + nbytes > len(blob):
                raise CheckpointError(f"tensor {name!r}: payload runs past end of file")
            tensors[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape)
            tensors[name] = tensors[name].astype(np.float32)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    return config, tensors


def save(path: Union[str, Path], config: dict, tensors: Dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(config, tensors))
    tmp.replace(path)


def load(path: Union[str, Path]) -> Tuple[dict, Dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
