"""Binary checkpoint format.

All integers and floats are little-endian::

    magic        8 bytes   b"FSEGCKPT"
    version      u32       FORMAT_VERSION
    config_len   u32
    config       config_len bytes, UTF-8 JSON of VNetConfig
    step         u64       Adam step counter t
    beta1        f64
    beta2        f64
    eps          f64
    n_tensors    u32
    n_tensors times:
        name_len u16, name (UTF-8)
        ndim     u8,  dims (u32 each)
        payload  prod(dims) f32 values
    end          4 bytes   b"END."

Tensor names are prefixed ``param/``, ``buffer/`` (BN running stats),
``adam.m/`` and ``adam.v/``. Models are stored and restored in float32.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import MalformedCheckpoint, VersionMismatch
from .vnet import VNetConfig, VNetModel

MAGIC = b"FSEGCKPT"
END = b"END."
FORMAT_VERSION = 1


def _tensors(model: VNetModel):
    params = model.named_parameters()
    out = [(f"param/{n}", t.data) for n, t in params]
    out += [(f"buffer/{n}", b) for n, b in model.named_buffers()]
    out += [(f"adam.m/{n}", m) for (n, _), m in zip(params, model.adam.m)]
    out += [(f"adam.v/{n}", v) for (n, _), v in zip(params, model.adam.v)]
    return out


def checkpoint_bytes(model: VNetModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
    buf.write(cfg)
    a = model.adam
    buf.write(struct.pack("<Qddd", a.t, a.beta1, a.beta2, a.eps))
    tensors = _tensors(model)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    buf.write(END)
    return buf.getvalue()


def checkpoint_save(model: VNetModel, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedCheckpoint("unexpected end of checkpoint data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data: bytes) -> VNetModel:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise MalformedCheckpoint("bad magic")
    version, cfg_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, supported {FORMAT_VERSION}")
    try:
        config = VNetConfig(**json.loads(r.take(cfg_len).decode()))
    except (ValueError, TypeError) as exc:
        raise MalformedCheckpoint(f"bad config block: {exc}") from exc
    t, beta1, beta2, eps = r.unpack("<Qddd")
    (n_tensors,) = r.unpack("<I")
    stored = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64))
        stored[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
    if r.take(len(END)) != END or r.pos != len(data):
        raise MalformedCheckpoint("missing end marker or trailing bytes")

    model = VNetModel(config, seed=0, dtype=np.float32)
    expected = _tensors(model)
    if set(stored) != {n for n, _ in expected}:
        raise MalformedCheckpoint("tensor table does not match the configured network")
    for name, arr in expected:
        src = stored[name]
        if src.shape != arr.shape:
            raise MalformedCheckpoint(f"{name}: shape {src.shape}, expected {arr.shape}")
        arr[...] = src
    model.adam.t = t
    model.adam.beta1, model.adam.beta2, model.adam.eps = beta1, beta2, eps
    return model


def checkpoint_load(path) -> VNetModel:
    return checkpoint_from_bytes(Path(path).read_bytes())
