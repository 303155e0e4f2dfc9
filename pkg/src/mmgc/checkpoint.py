"""Binary checkpoint format.

Layout (little-endian)::

    b"MMGCKPT1"
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, float32 data
    JSON metadata trailer (config, vocab, seed, epoch, ...)
    u32 byte length of the trailer

The trailer also carries ``sha256``: a digest of the tensor section followed
by the canonical JSON of the remaining metadata, so any flipped byte is
reported as a FormatError instead of loading silently.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, DataIOError, FormatError
from .fusion import MMGCNet
from .report_encoder import Vocabulary
from .train import load_parameters

MAGIC = b"MMGCKPT1"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: ModelConfig
    vocab: list[str]
    seed: int
    epoch: int
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: MMGCNet, vocab: Vocabulary | list[str], seed: int, epoch: int,
                   **extra) -> "Checkpoint":
        tokens = vocab.tokens if isinstance(vocab, Vocabulary) else list(vocab)
        tensors = {name: p.data.astype(np.float32) for name, p in model.named_parameters()}
        return cls(tensors, dataclasses.replace(model.config), tokens, seed, epoch, dict(extra))

    def to_model(self) -> MMGCNet:
        model = MMGCNet(dataclasses.replace(self.config), self.seed)
        load_parameters(model, self.tensors)
        return model

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.vocab)

    def metadata(self) -> dict:
        return {"config": dataclasses.asdict(self.config), "vocab": self.vocab, "seed": self.seed,
                "epoch": self.epoch, **self.extra}

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
        body = b"".join(parts)
        meta = self.metadata()
        meta["sha256"] = _digest(body, meta)
        trailer = json.dumps(meta, sort_keys=True).encode("utf-8")
        return body + trailer + struct.pack("<I", len(trailer))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        reader = _Reader(blob)
        if reader.take(len(MAGIC)) != MAGIC:
            raise FormatError("not a checkpoint: bad magic")
        if len(blob) < len(MAGIC) + 8:
            raise FormatError("checkpoint truncated")
        (trailer_len,) = struct.unpack("<I", blob[-4:])
        body_end = len(blob) - 4 - trailer_len
        if body_end < reader.pos + 4:
            raise FormatError("checkpoint truncated: trailer length out of range")
        (count,) = reader.unpack("<I")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            try:
                name = reader.take(name_len).decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError("tensor name is not valid UTF-8") from None
            (rank,) = reader.unpack("<B")
            if rank > 32:
                raise FormatError(f"tensor {name!r}: implausible rank {rank}")
            dims = reader.unpack(f"<{rank}I")
            size = math.prod(dims)  # python ints: no overflow on hostile dims
            data = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r}")
            tensors[name] = data
        if reader.pos != body_end:
            raise FormatError("checkpoint body length does not match its trailer")
        try:
            meta = json.loads(blob[body_end : len(blob) - 4].decode("utf-8"))
            digest = meta.pop("sha256")
            if digest != _digest(blob[:body_end], meta):
                raise FormatError("checkpoint checksum mismatch")
            config = ModelConfig(**meta.pop("config")).validate()
            vocab, seed, epoch = meta.pop("vocab"), int(meta.pop("seed")), int(meta.pop("epoch"))
        except (UnicodeDecodeError, json.JSONDecodeError, AttributeError, KeyError, TypeError, ValueError,
                ConfigError) as exc:
            raise FormatError(f"corrupted checkpoint metadata: {exc}") from None
        _check_architecture(tensors, config)
        return cls(tensors, config, vocab, seed, epoch, meta)

    def save(self, path: str | Path) -> None:
        try:
            Path(path).write_bytes(self.to_bytes())
        except OSError as exc:
            raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(blob)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.metadata() == other.metadata()
            and list(self.tensors) == list(other.tensors)
            and all(self.tensors[k].shape == other.tensors[k].shape
                    and self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors)
        )


def _digest(body: bytes, meta: dict) -> str:
    h = hashlib.sha256(body)
    h.update(json.dumps(meta, sort_keys=True).encode("utf-8"))
    return h.hexdigest()


def _check_architecture(tensors: dict[str, np.ndarray], config: ModelConfig) -> None:
    expected = {name: p.shape for name, p in MMGCNet(dataclasses.replace(config), 0).named_parameters()}
    got = {name: arr.shape for name, arr in tensors.items()}
    if got != expected:
        raise FormatError("checkpoint tensors do not match the architecture in its config")


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.blob):
            raise FormatError("checkpoint truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
