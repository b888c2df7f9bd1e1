"""Checkpoint file format.

Layout (all integers little-endian)::

    magic      8 bytes   b"SDTOYLM\\0"
    version    uint32    currently 1
    hdr_len    uint32    length of the UTF-8 JSON header that follows
    header     JSON      {"kind", "config", "step", "loss_kind", "rng_state",
                          "history", "tensors": [[name, shape], ...]}
    tensors    float64   each tensor in declaration order, C order, "<f8"

The tensor list in the header must match ``param_shapes(config, kind)``.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .model import ToyLMConfig, load_model, param_shapes

MAGIC = b"SDTOYLM\0"
VERSION = 1


@dataclass
class Checkpoint:
    model: object
    step: int = 0
    rng_state: dict = None
    loss_kind: str = "ce"
    history: list = field(default_factory=list)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _unjson(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _unjson(v) for k, v in obj.items()}
    return obj


def to_bytes(ckpt):
    model = ckpt.model
    header = {
        "kind": model.kind,
        "config": model.config.to_dict(),
        "step": int(ckpt.step),
        "loss_kind": ckpt.loss_kind,
        "rng_state": _jsonable(ckpt.rng_state),
        "history": [float(h) for h in ckpt.history],
        "tensors": [[n, list(s)] for n, s in param_shapes(model.config, model.kind)],
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(hdr)), hdr]
    for name, _ in param_shapes(model.config, model.kind):
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(buf):
    if buf[:8] != MAGIC:
        raise ValidationError("not a checkpoint file (bad magic)")
    version, hdr_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    off = 16
    header = json.loads(buf[off:off + hdr_len].decode())
    off += hdr_len
    config = ToyLMConfig(**header["config"])
    expected = param_shapes(config, header["kind"])
    if [[n, list(s)] for n, s in expected] != header["tensors"]:
        raise ValidationError("tensor table does not match config")
    params = {}
    for name, shape in expected:
        n = int(np.prod(shape))
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(buf):
        raise ValidationError("trailing bytes after last tensor")
    model = load_model(header["kind"], config, params)
    return Checkpoint(model, header["step"], _unjson(header["rng_state"]),
                      header["loss_kind"], header["history"])


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
