"""Self-describing binary checkpoints.

Layout::

    MB3D-CKPT <format version>\\n
    <manifest byte length>\\n
    <manifest JSON, sorted keys>
    <parameters as little-endian float64, in manifest order>

The manifest records the model kind and config, each parameter's name, shape
and frozen flag, the epoch/stage counters and the RNG state, so a file can be
rebuilt without any other input. Saving a loaded checkpoint reproduces it
byte for byte.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import ShapeMismatch, VersionMismatch
from .logger import log_event

MAGIC = b"MB3D-CKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: Any
    epoch: int = 0
    stage: int = 0
    rng_state: Optional[dict] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def rng(self) -> np.random.Generator:
        """Generator restored to the saved state (fresh default if none was saved)."""
        gen = np.random.default_rng()
        if self.rng_state is not None:
            gen.bit_generator.state = self.rng_state
        return gen


def _model_class(kind: str):
    from .model import BranchModel
    from .nn import Sequential

    registry = {Sequential.checkpoint_kind: Sequential, BranchModel.checkpoint_kind: BranchModel}
    if kind not in registry:
        raise VersionMismatch(f"unknown model kind {kind!r}")
    return registry[kind]


def encode_checkpoint(
    model: Any,
    epoch: int = 0,
    stage: int = 0,
    rng: Optional[np.random.Generator] = None,
    extra: Optional[Dict[str, Any]] = None,
    rng_state: Optional[dict] = None,
) -> bytes:
    named = model.named_parameters()
    if rng is not None:
        rng_state = rng.bit_generator.state
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": model.checkpoint_kind,
        "config": model.config(),
        "params": [
            {"name": n, "shape": list(t.values.shape), "frozen": bool(t.frozen)} for n, t in named
        ],
        "epoch": int(epoch),
        "stage": int(stage),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(t.values, dtype="<f8").tobytes() for _, t in named)
    return MAGIC + f" {FORMAT_VERSION}\n{len(head)}\n".encode("ascii") + head + blob


def save_checkpoint(
    model: Any,
    path: str | Path,
    epoch: int = 0,
    stage: int = 0,
    rng: Optional[np.random.Generator] = None,
    extra: Optional[Dict[str, Any]] = None,
    rng_state: Optional[dict] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(model, epoch, stage, rng, extra, rng_state)
    path.write_bytes(data)
    log_event("checkpoint_saved", path=str(path), epoch=epoch, stage=stage, bytes=len(data))
    return path


def _read_line(data: bytes, pos: int) -> tuple:
    end = data.find(b"\n", pos)
    if end < 0:
        raise VersionMismatch("truncated checkpoint header")
    return data[pos:end], end + 1


def decode_checkpoint(data: bytes, into: Any = None) -> Checkpoint:
    first, pos = _read_line(data, 0)
    parts = first.split(b" ")
    if len(parts) != 2 or parts[0] != MAGIC:
        raise VersionMismatch("not a checkpoint file")
    if parts[1] != str(FORMAT_VERSION).encode("ascii"):
        raise VersionMismatch(f"checkpoint format {parts[1].decode(errors='replace')}, expected {FORMAT_VERSION}")
    length_line, pos = _read_line(data, pos)
    head_len = int(length_line)
    manifest = json.loads(data[pos:pos + head_len].decode("utf-8"))
    pos += head_len
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"manifest format {manifest.get('format_version')}, expected {FORMAT_VERSION}")

    model = into if into is not None else _model_class(manifest["kind"]).from_config(manifest["config"])
    named = model.named_parameters()
    entries: List[dict] = manifest["params"]
    expected = [(e["name"], tuple(e["shape"])) for e in entries]
    actual = [(n, tuple(t.values.shape)) for n, t in named]
    if expected != actual:
        raise ShapeMismatch("checkpoint parameters do not match the target model")

    total = sum(int(np.prod(s)) for _, s in expected)
    if (len(data) - pos) % 8:
        raise ShapeMismatch("parameter blob is not a whole number of float64 values")
    flat = np.frombuffer(data, dtype="<f8", count=-1, offset=pos)
    if flat.size != total:
        raise ShapeMismatch(f"parameter blob holds {flat.size} values, manifest declares {total}")
    offset = 0
    for entry, (_, t) in zip(entries, named):
        size = int(np.prod(entry["shape"]))
        t.values = flat[offset:offset + size].reshape(entry["shape"]).astype(np.float64)
        t.frozen = bool(entry["frozen"])
        t.grad = None
        offset += size
    return Checkpoint(
        model=model,
        epoch=int(manifest["epoch"]),
        stage=int(manifest["stage"]),
        rng_state=manifest.get("rng_state"),
        extra=manifest.get("extra", {}),
    )


def load_checkpoint(path: str | Path, into: Any = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), into=into)
