"""XRAG binary checkpoints.

Layout (all integers little-endian u32)::

    b"XRAG" | version | header_len | header (UTF-8 JSON, sorted keys)
    | n_tensors | per tensor: name_len | name | rank | dims... | float64 LE data

The JSON header carries the ModelConfig, the vocabulary and the fusion/gate
settings.  Tensors are written in the system's parameter order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import LoadError
from .fusion import AugmentationModule
from .gate import RetrievalGate
from .model import Generator
from .pipeline import ExpertRAG
from .tensor import Tensor
from .vocab import Vocab

MAGIC = b"XRAG"
VERSION = 1


def _header(system: ExpertRAG) -> dict:
    return {
        "model": system.config.to_dict(),
        "vocab": system.vocab.tokens,
        "fusion_mode": system.fusion_mode,
        "gate_mode": system.gate.mode,
        "gate_threshold": system.gate.threshold,
    }


def to_bytes(system: ExpertRAG) -> bytes:
    header = json.dumps(_header(system), sort_keys=True).encode("utf-8")
    params = system.named_parameters()
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", t.ndim) + b"".join(struct.pack("<I", n) for n in t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(out)


def save(system: ExpertRAG, path: str | Path) -> str:
    """Write a checkpoint and return its SHA-256 hex digest."""
    blob = to_bytes(system)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def parameter_hash(system: ExpertRAG) -> str:
    return hashlib.sha256(to_bytes(system)).hexdigest()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise LoadError("checkpoint truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def from_bytes(blob: bytes) -> ExpertRAG:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise LoadError("not an XRAG checkpoint (bad magic bytes)")
    version = r.u32()
    if version != VERSION:
        raise LoadError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
        config = ModelConfig.from_dict(header["model"])
        vocab = Vocab(header["vocab"])
    except (ValueError, KeyError) as exc:
        raise LoadError(f"corrupt checkpoint header: {exc}") from None
    tensors: dict[str, Tensor] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    if r.pos != len(blob):
        raise LoadError("trailing bytes after last tensor")

    try:
        gen_params = {k: v for k, v in tensors.items() if not k.startswith(("gate.", "fusion."))}
        gate = RetrievalGate(tensors["gate.weight"], tensors["gate.bias"], header["gate_threshold"], header["gate_mode"])
        augment = None
        if "fusion.scorer" in tensors:
            n_slots = sum(1 for k in tensors if k.startswith("fusion.t"))
            augment = AugmentationModule([tensors[f"fusion.t{j}"] for j in range(n_slots)], tensors["fusion.scorer"])
    except KeyError as exc:
        raise LoadError(f"checkpoint is missing tensor {exc}") from None
    expected = Generator(config, 0).params
    if set(expected) != set(gen_params) or any(expected[k].shape != gen_params[k].shape for k in expected):
        raise LoadError("checkpoint tensors do not match its model configuration")
    generator = Generator(config, params={k: gen_params[k] for k in expected})
    return ExpertRAG(
        config, vocab, fusion_mode=header["fusion_mode"], gate_mode=header["gate_mode"],
        generator=generator, gate=gate, augment=augment,
    )


def load(path: str | Path) -> ExpertRAG:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return from_bytes(blob)
