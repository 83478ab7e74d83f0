"""Self-contained binary checkpoints.

Little-endian layout, no serialization library:

    u32  format version
    u32  config length, then that many UTF-8 bytes (flat key=value text)
    u64  iteration
    16B  rng state, 16B rng increment, u32 has_uint32, u32 uinteger
    u32  tensor count, then per tensor:
         u32 name length, name bytes, u32 dtype code (4=f32, 8=f64),
         u32 rank, u32 * rank dims, raw values

Model parameters are stored under their own names; optimizer slots use the
reserved prefixes ``opt.<tag>.m.`` / ``opt.<tag>.v.`` plus an ``opt.<tag>.step``
scalar. Writes go to a temp file renamed into place, so a crash never leaves
a half-written checkpoint behind.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import PartedModel
from .optim import Adam

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "CheckpointFormatError"]

FORMAT_VERSION = 1
_DTYPE_CODES = {4: np.float32, 8: np.float64}


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    version: int
    config_text: str
    iteration: int
    rng_state: dict
    tensors: dict = field(default_factory=dict)

    def make_rng(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.PCG64())
        gen.bit_generator.state = self.rng_state
        return gen

    def restore_model(self, model: PartedModel) -> None:
        for name, p in model.params.items():
            if name not in self.tensors:
                raise CheckpointFormatError(f"checkpoint is missing parameter {name}")
            stored = self.tensors[name]
            if stored.shape != p.data.shape:
                raise CheckpointFormatError(f"shape mismatch for {name}: {stored.shape} vs {p.data.shape}")
            p.data = stored.astype(p.dtype, copy=True)

    def restore_optimizer(self, tag: str, opt: Adam) -> bool:
        """Load moment buffers saved under ``tag``; returns False if absent."""
        step_key = f"opt.{tag}.step"
        if step_key not in self.tensors:
            return False
        opt.state.step = int(self.tensors[step_key][0])
        opt.state.first_moment = []
        opt.state.second_moment = []
        for p in opt.params:
            opt.state.first_moment.append(self.tensors[f"opt.{tag}.m.{p.name}"].copy())
            opt.state.second_moment.append(self.tensors[f"opt.{tag}.v.{p.name}"].copy())
        return True


def _rng_state_bytes(rng: np.random.Generator) -> bytes:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generators are checkpointable")
    return (
        int(st["state"]["state"]).to_bytes(16, "little")
        + int(st["state"]["inc"]).to_bytes(16, "little")
        + struct.pack("<II", int(st["has_uint32"]), int(st["uinteger"]))
    )


def _rng_state_from_bytes(blob: bytes) -> dict:
    return {
        "bit_generator": "PCG64",
        "state": {
            "state": int.from_bytes(blob[:16], "little"),
            "inc": int.from_bytes(blob[16:32], "little"),
        },
        "has_uint32": struct.unpack("<I", blob[32:36])[0],
        "uinteger": struct.unpack("<I", blob[36:40])[0],
    }


def _write_tensor(f, name: str, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    if array.dtype == np.float32:
        code = 4
    elif array.dtype == np.float64:
        code = 8
    else:
        raise ValueError(f"tensor {name} has unsupported dtype {array.dtype}")
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<II", code, array.ndim))
    f.write(struct.pack(f"<{array.ndim}I", *array.shape))
    if array.dtype.byteorder == ">":
        array = array.astype(array.dtype.newbyteorder("<"))
    f.write(array.tobytes())


def save_checkpoint(
    path,
    model: PartedModel,
    config_text: str,
    iteration: int,
    rng: np.random.Generator,
    optimizers: dict | None = None,
) -> None:
    tensors: list = [(name, p.data) for name, p in model.params.items()]
    if optimizers:
        for tag, opt in optimizers.items():
            if not opt.state.first_moment:
                continue
            tensors.append((f"opt.{tag}.step", np.array([opt.state.step], dtype=np.float64)))
            for p, m, v in zip(opt.params, opt.state.first_moment, opt.state.second_moment):
                tensors.append((f"opt.{tag}.m.{p.name}", m))
                tensors.append((f"opt.{tag}.v.{p.name}", v))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(struct.pack("<I", FORMAT_VERSION))
        blob = config_text.encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<Q", iteration))
        f.write(_rng_state_bytes(rng))
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(f, name, arr)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointFormatError(f"{path}: truncated at byte {off}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    version = struct.unpack("<I", take(4))[0]
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    config_len = struct.unpack("<I", take(4))[0]
    config_text = take(config_len).decode("utf-8")
    iteration = struct.unpack("<Q", take(8))[0]
    rng_state = _rng_state_from_bytes(take(40))
    count = struct.unpack("<I", take(4))[0]
    tensors = {}
    for _ in range(count):
        name_len = struct.unpack("<I", take(4))[0]
        name = take(name_len).decode("utf-8")
        code, rank = struct.unpack("<II", take(8))
        if code not in _DTYPE_CODES:
            raise CheckpointFormatError(f"{path}: unknown dtype code {code} for {name}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(dims)) * np.dtype(dtype).itemsize if rank else np.dtype(dtype).itemsize
        data = np.frombuffer(take(nbytes), dtype=dtype).reshape(dims).copy()
        tensors[name] = data
    if off != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(version, config_text, iteration, rng_state, tensors)
