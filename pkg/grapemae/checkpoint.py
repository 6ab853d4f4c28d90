"""
Self-describing checkpoint container.

Layout (all integers little-endian):
    magic     8 bytes  b"GMAECKPT"
    version   u32
    meta_len  u64, then meta_len bytes of UTF-8 JSON (sorted keys)
    count     u64
    per tensor:
        name_len u32, name (UTF-8)
        rank     u32, rank × u64 extents
        values   prod(extents) × float64
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from logzero import logger

from .errors import CheckpointError
from .models.base import Module

MAGIC = b"GMAECKPT"
FORMAT_VERSION = 1
DECODER_PREFIXES = ("decoder_", "mask_token")
PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    @property
    def config(self) -> dict:
        return dict(self.meta.get("config", {}))

    def model_tensors(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}

    def optimizer_tensors(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("optim.")}

    def has_decoder(self) -> bool:
        return any(name.startswith(DECODER_PREFIXES) for name in self.model_tensors())


def _encode_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = _encode_meta(ckpt.meta)
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<Q", len(meta)), meta]
    parts.append(struct.pack("<Q", len(ckpt.tensors)))
    for name, value in ckpt.tensors.items():
        arr = np.asarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(p)
    logger.debug(f"[ckpt] wrote {len(ckpt.tensors)} tensors to {p}")
    return p


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint {self.path} at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes, path: str = "<memory>") -> Checkpoint:
    r = _Reader(data, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a grapemae checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt metadata ({e})") from e
    (count,) = r.unpack("<Q")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return Checkpoint(tensors, meta, version)


def load_checkpoint(path: PathLike) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    return from_bytes(p.read_bytes(), str(p))


def validate_shapes(ckpt: Checkpoint, model: Module, allow_missing: bool = False) -> List[str]:
    """
    Check every checkpoint tensor the model also owns against the model's shapes.
    Returns the names the model owns but the checkpoint lacks; raises unless
    `allow_missing`.
    """
    expected = {name: p.shape for name, p in model.named_parameters()}
    offending = [
        f"{name}: checkpoint {tuple(v.shape)} vs model {expected[name]}"
        for name, v in ckpt.model_tensors().items()
        if name in expected and tuple(v.shape) != tuple(expected[name])
    ]
    missing = [name for name in expected if name not in ckpt.tensors]
    if offending:
        raise CheckpointError("checkpoint shapes do not match the configured model", offending)
    if missing and not allow_missing:
        raise CheckpointError("checkpoint lacks tensors the model needs", missing)
    return missing


def model_checkpoint(
    model: Module,
    config: dict,
    epoch: int,
    rng_state: Optional[dict] = None,
    optimizer_tensors: Optional[Dict[str, np.ndarray]] = None,
    optimizer_step: int = 0,
    extra: Optional[dict] = None,
) -> Checkpoint:
    tensors = dict(model.state_dict())
    if optimizer_tensors:
        tensors.update(optimizer_tensors)
    meta = {"config": config, "epoch": epoch, "optimizer_step": optimizer_step}
    if rng_state is not None:
        meta["rng_state"] = rng_state
    if extra:
        meta.update(extra)
    return Checkpoint(tensors, meta)


def encoder_tensors_from(ckpt: Checkpoint) -> Dict[str, np.ndarray]:
    """Encoder weights from a pre-text or downstream checkpoint, with the decoder and head dropped."""
    out = {}
    for name, value in ckpt.model_tensors().items():
        if name.startswith("encoder."):
            out[name[len("encoder.") :]] = value
        elif not name.startswith(DECODER_PREFIXES) and not name.startswith("head."):
            out[name] = value
    return out
