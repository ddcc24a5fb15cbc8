"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    bytes 0-3    magic b"RIMR"
    bytes 4-7    format version (1)
    bytes 8-11   metadata length in bytes
    ...          UTF-8 JSON metadata
    ...          parameter blob, float32 little-endian, manifest order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import NormStats
from .errors import CheckpointFormatError, CheckpointLengthError, CheckpointVersionError
from .model import RimerConfig, RimerModel, build_model

MAGIC = b"RIMR"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_BLOB_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: dict
    manifest: list[dict]
    blob: bytes
    train_stats: dict | None = None
    train_opts: dict | None = None
    epoch: int = 0
    source_dtype: str = "float32"
    extra: dict = field(default_factory=dict)

    @property
    def downcast(self) -> bool:
        return self.source_dtype != "float32"

    @classmethod
    def from_model(cls, model: RimerModel, opts=None, epoch: int = 0, extra: dict | None = None) -> "Checkpoint":
        named = model.named_parameters()
        manifest = [{"name": n, "shape": list(t.shape)} for n, t in named]
        blob = b"".join(np.ascontiguousarray(t.data, dtype=_BLOB_DTYPE).tobytes() for _, t in named)
        return cls(
            config=model.cfg.to_dict(),
            manifest=manifest,
            blob=blob,
            train_stats=model.norm_stats.to_dict() if model.norm_stats is not None else None,
            train_opts=opts.to_dict() if opts is not None else None,
            epoch=epoch,
            source_dtype=str(model.cfg.np_dtype.__name__),
            extra=dict(extra or {}),
        )

    def params(self) -> dict[str, np.ndarray]:
        expected = sum(int(np.prod(m["shape"])) for m in self.manifest) * 4
        if len(self.blob) != expected:
            raise CheckpointLengthError(f"parameter blob has {len(self.blob)} bytes, manifest needs {expected}")
        flat = np.frombuffer(self.blob, dtype=_BLOB_DTYPE)
        out, pos = {}, 0
        for m in self.manifest:
            n = int(np.prod(m["shape"]))
            out[m["name"]] = flat[pos:pos + n].reshape(m["shape"]).astype(np.float32)
            pos += n
        return out

    def rimer_config(self) -> RimerConfig:
        return RimerConfig.from_dict(self.config)

    def to_model(self) -> RimerModel:
        model = build_model(self.rimer_config(), seed=0)
        model.load_state_dict(self.params())
        if self.train_stats is not None:
            model.norm_stats = NormStats.from_dict(self.train_stats)
        return model

    def metadata(self) -> dict:
        return {
            "config": self.config,
            "train_stats": self.train_stats,
            "train_opts": self.train_opts,
            "epoch": self.epoch,
            "manifest": self.manifest,
            "source_dtype": self.source_dtype,
            "downcast": self.downcast,
            "extra": self.extra,
        }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = json.dumps(ckpt.metadata(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(meta)))
        fh.write(meta)
        fh.write(ckpt.blob)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointFormatError(f"{path}: file too short for a checkpoint header")
    magic, version, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this reader supports {VERSION}")
    start = _HEADER.size
    if len(raw) < start + meta_len:
        raise CheckpointLengthError(f"{path}: metadata truncated ({len(raw) - start} of {meta_len} bytes)")
    try:
        meta = json.loads(raw[start:start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable metadata: {exc}") from exc
    ckpt = Checkpoint(
        config=meta["config"],
        manifest=meta["manifest"],
        blob=raw[start + meta_len:],
        train_stats=meta.get("train_stats"),
        train_opts=meta.get("train_opts"),
        epoch=meta.get("epoch", 0),
        source_dtype=meta.get("source_dtype", "float32"),
        extra=meta.get("extra", {}),
    )
    ckpt.params()
    return ckpt
