"""Binary checkpoint container: magic "IDHDR1", JSON header, named f32 arrays."""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .util import atomic_write_bytes

MAGIC = b"IDHDR1"


class CheckpointError(ValueError):
    pass


def pack(header: dict, arrays: dict) -> bytes:
    """Serialize a header dict and named float32 arrays, little-endian throughout."""
    out = [MAGIC]
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(header_bytes)))
    out.append(header_bytes)
    out.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype != np.float32:
            raise CheckpointError(f"array {name!r} must be float32, got {arr.dtype}")
        name_bytes = name.encode("utf-8")
        out.append(struct.pack("<H", len(name_bytes)))
        out.append(name_bytes)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f4", copy=False).tobytes())
    return b"".join(out)


def unpack(data: bytes):
    """Inverse of pack(); returns (header, {name: float32 array})."""
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not an IDHDR1 checkpoint")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * 4
        arrays[name] = np.frombuffer(data[off:off + size], dtype="<f4").reshape(shape).copy()
        off += size
    if off != len(data):
        raise CheckpointError(f"trailing bytes in checkpoint ({len(data) - off})")
    return header, arrays


def save(path, header: dict, arrays: dict):
    atomic_write_bytes(path, pack(header, arrays))


def load(path):
    with open(path, "rb") as fh:
        return unpack(fh.read())


def state_arrays(module: torch.nn.Module, prefix: str = ""):
    """Flatten a module state dict to named float32 arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        if not tensor.is_floating_point():
            raise CheckpointError(f"non-float state entry {name!r}")
        out[prefix + name] = tensor.detach().cpu().to(torch.float32).numpy()
    return out


def load_state(module: torch.nn.Module, arrays: dict, prefix: str = ""):
    """Load arrays saved by state_arrays back into a module, strict on names."""
    state = {}
    for name, tensor in module.state_dict().items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing array {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for {key!r}: checkpoint {arr.shape} vs model {tuple(tensor.shape)}")
        state[name] = torch.from_numpy(arr)
    module.load_state_dict(state)
    return module
