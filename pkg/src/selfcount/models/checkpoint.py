"""Checkpoint container and its binary file format.

Layout, little-endian throughout::

    b"CSSN" | u8 version | u32 tensor count
    per tensor: u32 name length | name (utf-8) | u32 rank | u32 dims[rank] | f32 values
    b"META" | u32 length | key=value lines (utf-8)

The trailing META block carries the training stage, seed, config hash and
network flags. Readers reject files with a wrong magic or version, and
truncated files.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union

import numpy as np

from selfcount.models.net import Network

logger = logging.getLogger(__name__)

MAGIC = b"CSSN"
META_MAGIC = b"META"
VERSION = 1


class CheckpointFormatError(RuntimeError):
    """File is not a readable checkpoint."""


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    stage: str
    seed: int
    config_hash: str
    meta: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: Network, stage: str, seed: int, config_hash: str) -> "Checkpoint":
        params = {name: value.astype("<f4") for name, value in net.params.items()}
        meta = {
            "use_skip": str(int(net.use_skip)),
            "rotation_classes": str(net.rotation_classes),
        }
        return cls(params=params, stage=stage, seed=seed, config_hash=config_hash, meta=meta)

    def to_network(self) -> Network:
        """Rebuild a float32 network; every parameter starts trainable."""
        params = {name: value.astype(np.float32) for name, value in self.params.items()}
        return Network(
            params=params,
            use_skip=self.meta.get("use_skip", "1") == "1",
            rotation_classes=int(self.meta.get("rotation_classes", "4")),
        )


def _encode_meta(ckpt: Checkpoint) -> bytes:
    entries = {
        **ckpt.meta,
        "stage": ckpt.stage,
        "seed": str(ckpt.seed),
        "config_hash": ckpt.config_hash,
    }
    for key, value in entries.items():
        if "\n" in key or "=" in key or "\n" in value:
            raise ValueError(f"metadata entry {key!r} cannot be stored")
    return "\n".join(f"{k}={v}" for k, v in sorted(entries.items())).encode("utf-8")


def encode(ckpt: Checkpoint) -> bytes:
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(ckpt.params))]
    for name, value in ckpt.params.items():
        raw_name = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        chunks.append(array.tobytes())
    meta = _encode_meta(ckpt)
    chunks.append(META_MAGIC + struct.pack("<I", len(meta)) + meta)
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointFormatError(f"{self.source}: truncated at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(data, source)
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic, not a checkpoint")
    version, count = reader.unpack("<BI")
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: unsupported version {version}")

    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape)
        params[name] = values.copy()

    if reader.take(4) != META_MAGIC:
        raise CheckpointFormatError(f"{source}: missing metadata block")
    (meta_len,) = reader.unpack("<I")
    meta: Dict[str, str] = {}
    for line in reader.take(meta_len).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    if reader.pos != len(data):
        raise CheckpointFormatError(f"{source}: {len(data) - reader.pos} trailing bytes")
    try:
        stage = meta.pop("stage")
        seed = int(meta.pop("seed"))
        config_hash = meta.pop("config_hash")
    except (KeyError, ValueError) as e:
        raise CheckpointFormatError(f"{source}: incomplete metadata") from e
    return Checkpoint(params=params, stage=stage, seed=seed, config_hash=config_hash, meta=meta)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(ckpt))
    logger.info("Saved %s checkpoint to %s", ckpt.stage, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    ckpt = decode(path.read_bytes(), source=str(path))
    logger.info("Loaded %s checkpoint from %s", ckpt.stage, path)
    return ckpt
