"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic        8 bytes   b"SAMILCK\\x00"
    version      u32       currently 1
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON (free-form metadata)
    n_params     u32
    n_params x tensor record
    has_opt      u8        0 or 1
    if has_opt:
        lr, weight_decay, momentum   3 x f64
        n_velocity                   u32
        n_velocity x tensor record
    crc32        u32       zlib.crc32 of every preceding byte

    tensor record:
        name_len u16, name (UTF-8), ndim u8, dims u32 x ndim,
        payload: prod(dims) float32 values, little-endian, C order
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from samil.diffcore.optim import OptimizerState
from samil.errors import FormatError

MAGIC = b"SAMILCK\x00"
VERSION = 1


def _write_record(buf, name, arr):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _read(buf, n):
    chunk = buf.read(n)
    if len(chunk) != n:
        raise FormatError("unexpected end of checkpoint")
    return chunk


def _read_record(buf):
    (name_len,) = struct.unpack("<H", _read(buf, 2))
    name = _read(buf, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read(buf, 1))
    shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(_read(buf, 4 * count), dtype="<f4").reshape(shape)
    return name, arr.astype(np.float32)


def dumps(params: dict, opt: OptimizerState | None = None, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        _write_record(buf, name, arr)
    if opt is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<3d", opt.lr, opt.weight_decay, opt.momentum))
        buf.write(struct.pack("<I", len(opt.velocity)))
        for name, arr in opt.velocity.items():
            _write_record(buf, name, arr)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes):
    """Parse a checkpoint; returns ``(params, optimizer_state_or_None, meta)``."""
    if len(blob) < len(MAGIC) + 8:
        raise FormatError("checkpoint too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch (corrupt or truncated)")
    buf = io.BytesIO(body)
    if _read(buf, len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint file")
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", _read(buf, 4))
    meta = json.loads(_read(buf, meta_len).decode("utf-8"))
    (n,) = struct.unpack("<I", _read(buf, 4))
    params = dict(_read_record(buf) for _ in range(n))
    (has_opt,) = struct.unpack("<B", _read(buf, 1))
    opt = None
    if has_opt:
        lr, wd, mom = struct.unpack("<3d", _read(buf, 24))
        (nv,) = struct.unpack("<I", _read(buf, 4))
        velocity = dict(_read_record(buf) for _ in range(nv))
        opt = OptimizerState(lr=lr, weight_decay=wd, momentum=mom, velocity=velocity)
    if buf.read(1):
        raise FormatError("trailing bytes in checkpoint")
    return params, opt, meta


def save_checkpoint(path, params: dict, opt: OptimizerState | None = None, meta: dict | None = None):
    Path(path).write_bytes(dumps(params, opt, meta))


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
