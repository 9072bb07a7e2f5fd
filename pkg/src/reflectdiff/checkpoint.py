"""Byte-deterministic checkpoint container.

A checkpoint is a single file: magic, a little-endian uint64 header length,
a canonical-JSON header (manifest plus an array index), then the raw
little-endian array payload. Identical contents always produce identical
bytes, and the format round-trips arrays bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "module_arrays", "load_module_arrays"]

_MAGIC = b"RDCKPT1\n"


@dataclass
class Checkpoint:
    manifest: dict
    arrays: dict


def save_checkpoint(path, manifest: dict, arrays: dict) -> None:
    """Write named numpy arrays plus a JSON manifest."""
    index = {}
    offset = 0
    names = sorted(arrays)
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        arrays[name] = arr
        index[name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        }
        offset += arr.nbytes
    header = json.dumps(
        {"manifest": manifest, "arrays": index}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for name in names:
            f.write(arrays[name].tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for name, meta in header["arrays"].items():
        start, n = meta["offset"], meta["nbytes"]
        if start + n > len(payload):
            raise ValueError(f"{path}: truncated payload for array {name!r}")
        buf = payload[start : start + n]
        arrays[name] = np.frombuffer(buf, dtype=np.dtype(meta["dtype"])).reshape(
            meta["shape"]
        ).copy()
    return Checkpoint(manifest=header["manifest"], arrays=arrays)


def module_arrays(module: torch.nn.Module, prefix: str) -> dict:
    """state_dict as prefixed numpy arrays."""
    return {
        f"{prefix}.{k}": v.detach().cpu().numpy().copy()
        for k, v in module.state_dict().items()
    }


def load_module_arrays(module: torch.nn.Module, arrays: dict, prefix: str) -> None:
    """Restore a module from prefixed arrays; raises KeyError on a missing one."""
    state = {}
    want = module.state_dict()
    for k, ref in want.items():
        name = f"{prefix}.{k}"
        if name not in arrays:
            raise KeyError(f"checkpoint is missing array {name!r}")
        state[k] = torch.from_numpy(arrays[name].copy()).to(ref.dtype)
    module.load_state_dict(state)
