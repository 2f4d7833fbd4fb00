"""Versioned checkpoint container for teacher and student runs."""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

FORMAT = "lightbsr-checkpoint"
VERSION = 1
STAGES = ("teacher_stage1", "teacher_stage2", "student_stage1", "student_stage2")


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointBundle:
    role: str  # "teacher" | "student"
    stage: str
    config: dict  # resolved RunConfig echo
    model: dict  # state dict of the SR network
    optimizer: Optional[dict] = None
    extra: dict = field(default_factory=dict)  # projector, momentum branch, queue, ...
    basis_hash: str = ""
    step: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage {self.stage!r}")
        if not self.stage.startswith(self.role):
            raise CheckpointError(f"stage {self.stage} does not belong to a {self.role}")

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "role": self.role,
            "stage": self.stage,
            "config": self.config,
            "model": self.model,
            "optimizer": self.optimizer,
            "extra": self.extra,
            "basis_hash": self.basis_hash,
            "step": self.step,
            "epoch": self.epoch,
        }

    def save(self, path) -> str:
        buf = io.BytesIO()
        torch.save(self.to_dict(), buf)
        Path(path).write_bytes(buf.getvalue())
        return self.digest()

    @classmethod
    def load(cls, path) -> "CheckpointBundle":
        try:
            d = torch.load(path, map_location="cpu", weights_only=True)
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
        if not isinstance(d, dict) or d.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} file")
        if d["version"] != VERSION:
            raise CheckpointError(f"{path}: unsupported version {d['version']}")
        return cls(
            d["role"], d["stage"], d["config"], d["model"], d["optimizer"], d["extra"],
            d["basis_hash"], d["step"], d["epoch"],
        )

    def digest(self) -> str:
        """Content hash over metadata and every tensor, independent of file layout."""
        h = hashlib.sha256()
        _feed(h, self.to_dict())
        return h.hexdigest()


def _feed(h, obj) -> None:
    if isinstance(obj, torch.Tensor):
        t = obj.detach().cpu().contiguous()
        h.update(f"T{t.dtype}{tuple(t.shape)}".encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    elif isinstance(obj, dict):
        h.update(b"{")
        for k in sorted(obj, key=str):
            h.update(str(k).encode() + b":")
            _feed(h, obj[k])
        h.update(b"}")
    elif isinstance(obj, (list, tuple)):
        h.update(b"[")
        for v in obj:
            _feed(h, v)
        h.update(b"]")
    elif isinstance(obj, np.ndarray):
        h.update(obj.tobytes())
    else:
        h.update(json.dumps(obj, sort_keys=True, default=str).encode())
