"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"SPLF"
    version u32      format version (currently 1)
    hash    u64      architecture hash of the producing config
    iter    u64      training iteration counter
    count   u32      number of named tensor fields
    then per field:
        name_len u16, name utf-8 bytes
        dtype    u8   (0=f32, 1=f64, 2=i64, 3=u8)
        ndim     u8
        dims     ndim x u64
        data     raw little-endian tensor bytes

The file is read fully and validated before any state is returned, so a
truncated or corrupt checkpoint never yields partial state.
"""

from __future__ import annotations

import struct
import sys

import numpy as np
import torch

MAGIC = b"SPLF"
VERSION = 1

_DTYPE_CODES = {
    torch.float32: 0,
    torch.float64: 1,
    torch.int64: 2,
    torch.uint8: 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NP_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}


class CheckpointError(Exception):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


def write_checkpoint(path, fields: dict[str, torch.Tensor], iteration: int,
                     config_hash: int):
    if sys.byteorder != "little":
        raise CheckpointError("checkpoint format requires a little-endian host")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<IQQ", VERSION, config_hash, iteration)
    blob += struct.pack("<I", len(fields))
    for name, tensor in fields.items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"field {name!r} has unsupported dtype {t.dtype}")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<BB", _DTYPE_CODES[t.dtype], t.ndim)
        blob += struct.pack(f"<{t.ndim}Q", *t.shape)
        blob += t.numpy().tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path, expected_hash: int | None = None):
    """Returns (fields dict, iteration, config_hash); validates everything first."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, config_hash, iteration = r.unpack("<IQQ")
    if version != VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: format version {version}, expected {VERSION}")
    if expected_hash is not None and config_hash != expected_hash:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint was written with an incompatible configuration "
            f"(hash {config_hash:#x}, expected {expected_hash:#x})")
    (count,) = r.unpack("<I")
    fields = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: field {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        numel = 1
        for d in shape:
            numel *= d
        raw = r.take(numel * np.dtype(_NP_DTYPES[code]).itemsize)
        arr = np.frombuffer(raw, dtype=_NP_DTYPES[code]).reshape(shape).copy()
        fields[name] = torch.from_numpy(arr)
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return fields, iteration, config_hash
