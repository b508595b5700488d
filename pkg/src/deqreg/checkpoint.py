"""Binary checkpoint persistence.

Layout (all little-endian)::

    b"DEQR"                       magic
    uint32                        format version
    uint32 l, uint32 d, uint32 C  dimensions
    uint32 n, n bytes             nonlinearity tag (utf-8)
    float64                       gamma
    5 x (uint64 n, n float64)     W, U, b, V, c in row-major order
    uint32 n, n bytes             metadata as JSON (utf-8)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deq import PARAM_NAMES, DeqModel
from .errors import BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError

MAGIC = b"DEQR"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: DeqModel
    train_config: dict = field(default_factory=dict)
    best: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _shapes(l, d, C):
    return {"W": (d, d), "U": (d, l), "b": (d,), "V": (C, d), "c": (C,)}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    m = ckpt.model
    l, d, C = m.dims
    tag = m.nonlinearity.encode("utf-8")
    meta = json.dumps({"train_config": ckpt.train_config, "best": ckpt.best},
                      sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<III", l, d, C),
             struct.pack("<I", len(tag)), tag, struct.pack("<d", m.gamma)]
    for name in PARAM_NAMES:
        arr = np.ascontiguousarray(getattr(m, name), dtype="<f8")
        parts += [struct.pack("<Q", arr.size), arr.tobytes()]
    parts += [struct.pack("<I", len(meta)), meta]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf, source):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"{self.source}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes, source="<bytes>") -> Checkpoint:
    r = _Reader(buf, source)
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    r.take(len(MAGIC), "magic")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version, FORMAT_VERSION)
    l, d, C = r.unpack("<III", "dimensions")
    (n,) = r.unpack("<I", "nonlinearity length")
    tag = r.take(n, "nonlinearity").decode("utf-8")
    (gamma,) = r.unpack("<d", "gamma")
    params = {}
    for name, shape in _shapes(l, d, C).items():
        (size,) = r.unpack("<Q", f"{name} length")
        if size != int(np.prod(shape)):
            raise CheckpointError(
                f"{source}: {name} has {size} entries, header dims imply {int(np.prod(shape))}")
        raw = r.take(8 * size, name)
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    (n,) = r.unpack("<I", "metadata length")
    meta = json.loads(r.take(n, "metadata").decode("utf-8"))
    if r.pos != len(buf):
        raise TruncatedCheckpointError(f"{source}: {len(buf) - r.pos} trailing bytes")
    model = DeqModel(nonlinearity=tag, gamma=gamma, **params)
    return Checkpoint(model=model, train_config=meta.get("train_config", {}),
                      best=meta.get("best", {}), version=version)


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    try:
        path.write_bytes(encode_checkpoint(ckpt))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), source=str(path))
