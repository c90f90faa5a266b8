"""Versioned binary container for named weight tensors.

File layout (all integers little-endian):

    8 bytes   magic ``GGTENSR1``
    u32       schema version (currently 1)
    u32       metadata byte count, then that many bytes of UTF-8 JSON
    u32       tensor count
    per tensor:
        u16       name byte count, then UTF-8 name
        u8        dtype code (see DTYPE_CODES)
        u8        rank
        u32*rank  shape
        u64       payload byte count, then C-order raw payload

Metadata is a flat JSON object for small scalars (step counters,
config hashes, optimizer hyperparameters). Everything array-shaped
goes in the tensor table.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import ContractError

MAGIC = b"GGTENSR1"
SCHEMA_VERSION = 1

DTYPE_CODES = {
    0: np.dtype(np.float32),
    1: np.dtype(np.float64),
    2: np.dtype(np.int64),
    3: np.dtype(np.uint8),
}
_CODE_FOR_DTYPE = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(ContractError):
    """Malformed, truncated, or incompatible checkpoint file."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray],
                 metadata: dict[str, Any] | None = None) -> None:
    """Write named arrays to ``path`` atomically (tmp file + rename)."""
    path = Path(path)
    meta_blob = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", SCHEMA_VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _CODE_FOR_DTYPE:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor '{name}'")
            name_b = name.encode("utf-8")
            if len(name_b) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name!r}")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _CODE_FOR_DTYPE[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload = arr.tobytes(order="C")
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a container written by :func:`save_tensors`.

    Returns ``(tensors, metadata)``. Raises :class:`CheckpointError` on any
    structural problem, naming the offending field.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        out = blob[off:off + n]
        off += n
        return out

    if take(8, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a tensor container")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema version {version}")
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    metadata = json.loads(take(meta_len, "metadata").decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"tensor {i} name length"))
        name = take(name_len, f"tensor {i} name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, f"'{name}' dtype/rank"))
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{path}: tensor '{name}' has unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"'{name}' shape"))
        (nbytes,) = struct.unpack("<Q", take(8, f"'{name}' payload size"))
        dtype = DTYPE_CODES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise CheckpointError(
                f"{path}: tensor '{name}' payload is {nbytes} bytes, expected {expected}")
        data = take(nbytes, f"'{name}' payload")
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return tensors, metadata


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a module state dict into container-ready arrays."""
    out = {}
    for key, value in module.state_dict().items():
        out[f"{prefix}.{key}"] = value.detach().cpu().numpy()
    return out


def load_module(module: torch.nn.Module, tensors: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    want = module.state_dict()
    for key, ref in want.items():
        name = f"{prefix}.{key}"
        if name not in tensors:
            raise CheckpointError(f"missing tensor '{name}' for module restore")
        state[key] = torch.from_numpy(tensors[name]).to(ref.dtype)
    module.load_state_dict(state)


def optimizer_tensors(optimizer: torch.optim.Optimizer,
                      prefix: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Split optimizer state into tensors plus a JSON-safe description."""
    sd = optimizer.state_dict()
    tensors: dict[str, np.ndarray] = {}
    for pid, entry in sd["state"].items():
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                tensors[f"{prefix}.state.{pid}.{key}"] = value.detach().cpu().numpy()
            else:
                raise CheckpointError(f"non-tensor optimizer state '{key}' not supported")
    meta = {"param_groups": sd["param_groups"],
            "state_keys": {str(pid): sorted(entry) for pid, entry in sd["state"].items()}}
    return tensors, meta


def restore_optimizer(optimizer: torch.optim.Optimizer, tensors: dict[str, np.ndarray],
                      meta: dict[str, Any], prefix: str) -> None:
    state: dict[int, dict[str, torch.Tensor]] = {}
    for pid_s, keys in meta["state_keys"].items():
        pid = int(pid_s)
        state[pid] = {}
        for key in keys:
            name = f"{prefix}.state.{pid}.{key}"
            if name not in tensors:
                raise CheckpointError(f"missing optimizer tensor '{name}'")
            state[pid][key] = torch.from_numpy(tensors[name])
    groups = []
    for group in meta["param_groups"]:
        group = dict(group)
        if "betas" in group:
            group["betas"] = tuple(group["betas"])
        groups.append(group)
    optimizer.load_state_dict({"state": state, "param_groups": groups})
