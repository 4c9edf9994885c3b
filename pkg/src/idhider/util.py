"""Shared plumbing: image/tensor conversion, train logs, atomic writes, hashing."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, C) float image in [0,1] -> (C, H, W) float32 tensor."""
    if image.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def to_batch(images) -> torch.Tensor:
    """List of (H, W, C) images -> (B, C, H, W) tensor."""
    return torch.stack([to_tensor(im) for im in images], dim=0)


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """(C, H, W) tensor -> (H, W, C) float32 image clipped to [0,1]."""
    if t.ndim != 3:
        raise ValueError(f"expected (C, H, W) tensor, got shape {tuple(t.shape)}")
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


@dataclass
class TrainLog:
    """Per-step loss traces, persisted as CSV with a fixed column order."""

    columns: list
    rows: list = field(default_factory=list)

    def append(self, *values):
        if len(values) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(tuple(float(v) for v in values))

    def column(self, name) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=np.float64)

    def smoothed(self, name, window=50) -> np.ndarray:
        """Trailing-mean smoothing; shorter-than-window prefixes use what exists."""
        vals = self.column(name)
        out = np.empty_like(vals)
        for i in range(len(vals)):
            out[i] = vals[max(0, i - window + 1):i + 1].mean()
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([repr(v) for v in row])
        return buf.getvalue()

    def save(self, path):
        atomic_write_text(path, self.to_csv())

    @classmethod
    def load(cls, path) -> "TrainLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            log = cls(columns=list(header))
            for row in reader:
                log.append(*[float(v) for v in row])
        return log


def atomic_write_bytes(path, data: bytes):
    """Write via temp file + rename so readers never see partial content."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(config: dict) -> str:
    return sha256_hex(canonical_json(config).encode("utf-8"))


def module_state_bytes(module: torch.nn.Module) -> bytes:
    """Deterministic byte serialization of parameters/buffers, for freeze checks."""
    chunks = []
    for name, tensor in sorted(module.state_dict().items()):
        chunks.append(name.encode("utf-8"))
        chunks.append(tensor.detach().cpu().numpy().tobytes())
    return b"".join(chunks)
