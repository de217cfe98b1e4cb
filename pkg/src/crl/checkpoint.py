"""Checkpoint file: ``CRLC`` magic, u16 version, u32 header length, JSON header, raw float64 tensors.

The header records the model config, tensor names/shapes in storage order and any
caller metadata (epoch counter, loss history). Optimiser velocities are stored as
extra tensors prefixed ``velocity/`` so a run can be resumed exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError
from .network import ModelConfig, OptimState, Parameters

MAGIC = b"CRLC"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def save_checkpoint(path, params: Parameters, state: OptimState | None = None, meta: dict | None = None) -> str:
    """Write the checkpoint and return the sha256 of the parameter payload."""
    tensors = list(params.tensors.items())
    if state is not None:
        tensors += [(f"velocity/{k}", v) for k, v in state.velocity.items()]
    header = {
        "model": params.config.to_dict(),
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
        "optim": None if state is None else {
            "lr": state.lr, "momentum": state.momentum, "weight_decay": state.weight_decay},
        "meta": meta or {},
    }
    raw_header = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(raw_header)))
        fh.write(raw_header)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return params_hash(params)


def params_hash(params: Parameters) -> str:
    h = hashlib.sha256()
    for name, arr in params.tensors.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path):
    """Return (Parameters, OptimState or None, meta dict)."""
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise DatasetFormatError(f"{path}: malformed checkpoint header", offset=len(buf))
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: not a checkpoint (magic {magic!r})", offset=0)
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    off = _PREFIX.size
    if len(buf) < off + hlen:
        raise DatasetFormatError(f"{path}: truncated checkpoint header", offset=len(buf))
    try:
        header = json.loads(buf[off:off + hlen])
    except ValueError:
        raise DatasetFormatError(f"{path}: checkpoint header is not valid JSON", offset=off) from None
    off += hlen
    config = ModelConfig.from_dict(header["model"])
    tensors, velocity = {}, {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(buf):
            raise DatasetFormatError(f"{path}: truncated tensor {name}", offset=len(buf))
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off = end
        if name.startswith("velocity/"):
            velocity[name[len("velocity/"):]] = arr
        else:
            tensors[name] = arr
    if off != len(buf):
        raise DatasetFormatError(f"{path}: {len(buf) - off} trailing bytes", offset=off)
    params = Parameters(config, tensors)
    state = None
    if header.get("optim") is not None and velocity:
        state = OptimState(velocity, **header["optim"])
    return params, state, header.get("meta", {})
