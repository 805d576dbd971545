"""Binary checkpoint format.

Layout (little-endian)::

    b"LASSCKPT"  u32 version  u32 tensor_count
    per tensor: u16 name_len, UTF-8 name, u8 dtype (0=f32, 1=f64), u8 rank,
                u32 dims[rank], raw payload
    trailer:    u32 meta_len, UTF-8 JSON metadata (sorted keys)

The JSON trailer carries everything that is not a tensor: model and
training configuration, vocabulary, step counter, RNG state and the Adam
step count.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"LASSCKPT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def encode(tensors, meta):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[CODES[arr.dtype]]).tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


def decode(buf):
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("checkpoint is truncated")
        out = buf[pos : pos + n]
        pos += n
        return out

    pos = 0
    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after checkpoint metadata")
    return tensors, meta


def save(path, tensors, meta):
    data = encode(tensors, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def assign(store, tensors, prefix=""):
    """Copy named arrays into a ParamStore, checking names and shapes strictly."""
    expected = {f"{prefix}{k}": v for k, v in store.tensors().items()}
    for name, arr in expected.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for tensor {name!r}: checkpoint has {tensors[name].shape}, model expects {arr.shape}"
            )
    for name in store.params:
        store.params[name].data = tensors[f"{prefix}{name}"].astype(store.dtype)
    for name in store.buffers:
        store.buffers[name] = tensors[f"{prefix}{name}"].astype(store.dtype)
    return set(expected)
