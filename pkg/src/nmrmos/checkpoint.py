"""Binary checkpoint container.

Layout (all integers little-endian)::

    8s   magic  b"NMRMOSCK"
    u32  format version
    u32  n bytes, then model config as UTF-8 JSON (sorted keys)
    u32  n bytes, then metadata as UTF-8 JSON (sorted keys)
    u32  record count
    per record:
        u16 name length, name (UTF-8)
        u8  ndim, then ndim x u32 dims
        float32 values, row-major
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, QualityNet, init_params
from .nn import parameter

MAGIC = b"NMRMOSCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: QualityNet, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for blob in (model.config.to_dict(), meta or {}):
        raw = json.dumps(blob, sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    buf.write(struct.pack("<I", len(model.params)))
    for name, tensor in model.params.items():
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(path: str | os.PathLike, model: QualityNet, meta: dict | None = None) -> None:
    data = checkpoint_bytes(model, meta)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from None


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("corrupt checkpoint: unexpected end of file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(blob: bytes, expected: ModelConfig | None = None) -> tuple[QualityNet, dict]:
    rd = _Reader(blob)
    if rd.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint version {version} (supported: {VERSION})")
    try:
        (n,) = rd.unpack("<I")
        config_dict = json.loads(rd.take(n).decode("utf-8"))
        (n,) = rd.unpack("<I")
        meta = json.loads(rd.take(n).decode("utf-8"))
        config = ModelConfig.from_dict(config_dict)
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: bad header ({exc})") from None
    reference = {k: v.shape for k, v in init_params(expected or config).items()}
    (count,) = rd.unpack("<I")
    params = {}
    names = list(reference)
    for idx in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8", errors="replace")
        (ndim,) = rd.unpack("<B")
        dims = rd.unpack(f"<{ndim}I") if ndim else ()
        if name not in reference or tuple(dims) != reference[name] or (idx < len(names) and names[idx] != name):
            want = reference[names[idx]] if idx < len(names) else None
            raise CheckpointError(f"checkpoint record {name!r} {tuple(dims)} does not match config "
                                  f"(expected {names[idx] if idx < len(names) else 'no record'!r} {want})")
        size = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(rd.take(4 * size), dtype="<f4").reshape(dims)
        params[name] = parameter(values.astype(np.float32), name=name)
    if count != len(reference):
        missing = names[count] if count < len(names) else "?"
        raise CheckpointError(f"checkpoint has {count} records, config needs {len(reference)} (first missing: {missing!r})")
    if rd.pos != len(blob):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    if expected is not None:
        diff = [k for k, v in expected.to_dict().items() if k != "seed" and config.to_dict().get(k) != v]
        if diff:
            raise CheckpointError(f"checkpoint config mismatch in {', '.join(diff)}")
    return QualityNet(config, params), meta


def load_checkpoint(path: str | os.PathLike, expected: ModelConfig | None = None) -> tuple[QualityNet, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        return parse_checkpoint(path.read_bytes(), expected)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
