"""Portable binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"ZENHCKPT"
    version    u32
    config     u32 length + UTF-8 JSON (full effective run config)
    step       u64
    dtype      u8       4 = float32 tensors, 8 = float64 tensors
    count      u32
    tensors    count x (u16 name length, UTF-8 name, u8 ndim, ndim x u32 extents,
                        little-endian data)

Model tensors are named ``model/<param>``, optimizer state ``optim/<key>``.
Files are written to a temporary name and renamed, so an interrupted save
never leaves a truncated checkpoint behind.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensors as T
from .train import ScaleAdam, TrainState
from .codec import ZipEnhancer
from .zipblocks import ModelConfig

MAGIC = b"ZENHCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    step: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    dtype: np.dtype = np.dtype(np.float32)

    def model_state(self) -> dict[str, np.ndarray]:
        return {k[len("model/"):]: v for k, v in self.tensors.items() if k.startswith("model/")}

    def optim_state(self) -> dict[str, np.ndarray]:
        return {k[len("optim/"):]: v for k, v in self.tensors.items() if k.startswith("optim/")}


def encode(ckpt: Checkpoint) -> bytes:
    dtype = np.dtype(ckpt.dtype)
    if dtype not in (np.float32, np.float64):
        raise CheckpointError(f"unsupported checkpoint dtype {dtype}")
    le = dtype.newbyteorder("<")
    buf = io.BytesIO()
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<QBI", ckpt.step, dtype.itemsize, len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=le)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode(blob: bytes) -> Checkpoint:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n_cfg,) = struct.unpack("<I", take(4))
    config = json.loads(bytes(take(n_cfg)).decode("utf-8"))
    step, itemsize, count = struct.unpack("<QBI", take(13))
    if itemsize not in (4, 8):
        raise CheckpointError(f"bad dtype flag {itemsize}")
    dtype = np.dtype(f"<f{itemsize}")
    tensors = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = bytes(take(n_name)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(n * itemsize), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(config, int(step), tensors, np.dtype(f"f{itemsize}"))


def save(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"checkpoint directory does not exist: {path.parent}")
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(encode(ckpt))
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def from_state(state: TrainState, config: dict, f64: bool = False) -> Checkpoint:
    tensors = {f"model/{k}": v for k, v in state.model.state_dict().items()}
    tensors.update({f"optim/{k}": v for k, v in state.optimizer.state_arrays().items()})
    return Checkpoint(config, state.step, tensors, np.dtype(np.float64 if f64 else np.float32))


def model_config(config: dict) -> ModelConfig:
    m = dict(config["model"])
    m["ratios"] = tuple(m["ratios"])
    return ModelConfig(**m)


def build_model(ckpt: Checkpoint, dtype=None) -> ZipEnhancer:
    """Model with the checkpoint's weights; shapes are validated against the config."""
    with T.precision(dtype or ckpt.dtype):
        model = ZipEnhancer(model_config(ckpt.config))
    try:
        model.load_state_dict(ckpt.model_state())
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint does not match its model config: {e}") from None
    return model


def to_state(ckpt: Checkpoint, dtype=None) -> TrainState:
    model = build_model(ckpt, dtype)
    opt = ScaleAdam(model.parameters())
    optim = ckpt.optim_state()
    if optim:
        try:
            opt.load_state_arrays(optim)
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"bad optimizer state: {e}") from None
    return TrainState(model, opt, ckpt.step)
