"""Versioned, tagged checkpoint container.

A checkpoint is a ``torch.save`` archive of a plain dict::

    {"format": "colorcnn", "version": 1, "kind": "classifier" | "quantizer",
     "config": {...}, "state_dict": {...}, "meta": {...},
     "optimizer": {...} | None, "scheduler": {...} | None}

Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import hashlib
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import CheckpointError, CheckpointKindError, CheckpointVersionError, FileMissingError

FORMAT = "colorcnn"
VERSION = 1
KINDS = ("classifier", "quantizer")


@dataclass
class Checkpoint:
    kind: str
    config: dict
    state_dict: dict
    meta: dict = field(default_factory=dict)
    optimizer: dict | None = None
    scheduler: dict | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CheckpointError(f"unknown checkpoint kind {self.kind!r}")

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save({"format": FORMAT, "version": VERSION, "kind": self.kind,
                    "config": self.config, "state_dict": self.state_dict, "meta": self.meta,
                    "optimizer": self.optimizer, "scheduler": self.scheduler}, buf)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, kind: str | None = None, source: str = "<bytes>") -> "Checkpoint":
        try:
            raw = torch.load(io.BytesIO(data), map_location="cpu", weights_only=False)
        except Exception as exc:
            raise CheckpointError(f"{source}: not a readable checkpoint ({exc})") from exc
        if not isinstance(raw, dict) or raw.get("format") != FORMAT:
            raise CheckpointError(f"{source}: not a {FORMAT} checkpoint")
        if raw.get("version") != VERSION:
            raise CheckpointVersionError(
                f"{source}: checkpoint format version {raw.get('version')} cannot be read by "
                f"this build (expects {VERSION}); re-export it with the release that wrote it "
                f"or retrain")
        if kind is not None and raw["kind"] != kind:
            raise CheckpointKindError(f"{source}: expected a {kind} checkpoint, found {raw['kind']}")
        return cls(raw["kind"], raw["config"], raw["state_dict"], raw.get("meta", {}),
                   raw.get("optimizer"), raw.get("scheduler"))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = ckpt.to_bytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | Path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileMissingError(f"checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes(), kind, str(path))


def state_checksum(module_or_state) -> str:
    """SHA-256 over parameter and buffer bytes in key order."""
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    h = hashlib.sha256()
    for key in sorted(state):
        t = state[key]
        h.update(key.encode())
        if torch.is_tensor(t):
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(repr(t).encode())
    return h.hexdigest()
