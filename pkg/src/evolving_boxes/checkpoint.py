"""Binary checkpoint format.

Layout (little-endian)::

    b"EVBX"  u32 version(=1)
    u32 n    n bytes UTF-8 text: model config keys, then state.* keys
    repeated until EOF:
        u32 name_len, name bytes, u32 rank, rank x u32 dims, float32 data
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_text, model_config_from_text, ModelConfig
from .errors import (ArchitectureMismatchError, CheckpointTruncatedError,
                     CheckpointVersionError, FormatError)
from .model import EvolvingBoxes, buffer_shapes, parameter_shapes

MAGIC = b"EVBX"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    learning_rate: float = 0.0
    format_version: int = VERSION

    @classmethod
    def from_model(cls, model: EvolvingBoxes, iteration: int = 0,
                   learning_rate: float = 0.0) -> "Checkpoint":
        tensors = {k: np.array(v, dtype=np.float32) for k, v in model.state_arrays().items()}
        return cls(model.config, tensors, iteration, learning_rate)

    def to_model(self) -> EvolvingBoxes:
        expected = dict(parameter_shapes(self.config))
        expected.update(buffer_shapes(self.config))
        for name, shape in expected.items():
            if name not in self.tensors:
                raise ArchitectureMismatchError(name, shape, ())
            if self.tensors[name].shape != tuple(shape):
                raise ArchitectureMismatchError(name, shape, self.tensors[name].shape)
        extra = set(self.tensors) - set(expected)
        if extra:
            name = sorted(extra)[0]
            raise ArchitectureMismatchError(name, (), self.tensors[name].shape)
        model = EvolvingBoxes.build(self.config, seed=0)
        for name, p in model.params.items():
            p.value = self.tensors[name].copy()
            p.zero_grad()
        for name in buffer_shapes(self.config):
            model.set_buffer(name, self.tensors[name])
        return model


def _config_text(ckpt: Checkpoint) -> str:
    text = dump_text(RunConfig(model=ckpt.config), sections=("model",))
    return text + f"state.iteration = {ckpt.iteration}\nstate.learning_rate = {ckpt.learning_rate!r}\n"


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    text = _config_text(ckpt).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", ckpt.format_version, len(text)), text]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {r.buf[:4]!r}, not a checkpoint")
    r.pos = 4
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    try:
        text = r.take(r.u32("config length"), "config").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: config block is not UTF-8") from exc
    state = {}
    model_lines = []
    for line in text.splitlines():
        if line.startswith("state."):
            k, _, v = line.partition("=")
            state[k.strip()] = v.strip()
        else:
            model_lines.append(line)
    config = model_config_from_text("\n".join(model_lines))
    tensors: dict[str, np.ndarray] = {}
    while not r.done:
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32(f"{name} rank")
        dims = tuple(r.u32(f"{name} dims") for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * count, f"{name} data"), dtype="<f4")
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = data.reshape(dims).astype(np.float32)
    return Checkpoint(config, tensors, int(state.get("state.iteration", 0)),
                      float(state.get("state.learning_rate", 0.0)), version)
