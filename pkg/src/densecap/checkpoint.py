"""Single-file checkpoint container.

Byte layout (all integers little-endian)::

    magic        8 bytes   b"DCAPCKPT"
    version      u32
    config_len   u64, then UTF-8 ``section.key = value`` run configuration
    meta_len     u64, then UTF-8 JSON (vocabulary tokens, extra metadata)
    iteration    u64
    n_tensors    u32
    per tensor:  name_len u16, UTF-8 name, ndim u32, ndim × u64 dims,
                 prod(dims) × f64 values (row-major)
    sha256       32 bytes over every preceding byte

Optimizer momentum buffers are stored as tensors named ``velocity/<param>``.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import SgdState

MAGIC = b"DCAPCKPT"
VERSION = 1
VELOCITY_PREFIX = "velocity/"


@dataclass
class CheckpointData:
    config_text: str
    meta: dict
    iteration: int
    tensors: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def encode_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def dumps(data: CheckpointData) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for blob in (data.config_text.encode("utf-8"), json.dumps(data.meta, sort_keys=True).encode("utf-8")):
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
    buf.write(struct.pack("<Q", data.iteration))
    items = list(data.tensors.items()) + [(VELOCITY_PREFIX + k, v) for k, v in data.velocity.items()]
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        encode_tensor(buf, name, np.asarray(arr, dtype=np.float64))
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, body: bytes):
        self.body = body
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.body):
            raise CheckpointError("checkpoint truncated")
        out = self.body[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(blob: bytes) -> CheckpointData:
    if len(blob) < len(MAGIC) + 36 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file corrupt)")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = r.unpack("<Q")
    config_text = r.take(n).decode("utf-8")
    (n,) = r.unpack("<Q")
    meta = json.loads(r.take(n).decode("utf-8"))
    (iteration,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    velocity: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        dims = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        if name.startswith(VELOCITY_PREFIX):
            velocity[name[len(VELOCITY_PREFIX):]] = arr
        else:
            tensors[name] = arr
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return CheckpointData(config_text, meta, iteration, tensors, velocity)


def save_checkpoint(path: str | Path, model, config_text: str, iteration: int, state: SgdState | None = None,
                    extra: dict | None = None) -> None:
    """Atomically write ``model`` (parameters, vocabulary) and optimizer state."""
    meta = {"vocab": model.vocab.itos, **(extra or {})}
    if state is not None:
        meta["learning_rate"] = state.learning_rate
        meta["momentum"] = state.momentum
    data = CheckpointData(
        config_text,
        meta,
        iteration,
        {k: p.data for k, p in model.named_parameters().items()},
        dict(state.velocity) if state is not None else {},
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(data))
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> CheckpointData:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)


def load_parameters(model, data: CheckpointData) -> None:
    params = model.named_parameters()
    missing = set(params) - set(data.tensors)
    extra = set(data.tensors) - set(params)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, p in params.items():
        if data.tensors[name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {data.tensors[name].shape} vs {p.shape}")
        p.data = data.tensors[name].copy()
