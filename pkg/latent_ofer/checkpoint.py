"""
Checkpoint container shared by every trained stage

Layout: magic ``LOFR`` | uint32 format version | uint32 header length |
UTF-8 JSON header | raw little-endian float32 tensors in header order.
"""

import json
import logging
import os
import struct
from typing import Any, Dict, Tuple

import numpy as np
import torch

from .errors import DataError, ModelError

logger = logging.getLogger(__name__)

MAGIC = b"LOFR"
FORMAT_VERSION = 1


def save_checkpoint(path: str, tensors: Dict[str, torch.Tensor], kind: str, meta: Dict[str, Any] = None):
    """
    Write tensors plus JSON metadata

    Args:
        path: Destination file
        tensors: Name -> tensor; stored as float32 regardless of source dtype
        kind: Stage tag checked on load ("reconstructor", "svdd", ...)
        meta: JSON-serializable metadata (model config, history, ...)
    """
    entries = []
    blobs = []
    for name, tensor in tensors.items():
        array = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4")
        entries.append({"name": name, "shape": list(array.shape), "dtype": "float32"})
        blobs.append(array.tobytes())

    header = json.dumps(
        {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    logger.debug("Saved %s checkpoint with %d tensors to %s", kind, len(entries), path)


def load_checkpoint(path: str, kind: str = None) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """
    Read a checkpoint written by save_checkpoint

    Returns:
        (tensors, meta)
    """
    if not os.path.exists(path):
        raise ModelError(kind or "checkpoint", f"Checkpoint not found: {path}")

    with open(path, "rb") as f:
        data = f.read()

    if data[:4] != MAGIC:
        raise DataError(f"Not a checkpoint file: {path}", code="bad-checkpoint")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise DataError(f"Unsupported checkpoint version {version} in {path}", code="bad-checkpoint")

    header = json.loads(data[12:12 + header_len].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise ModelError(kind, f"{path} holds a '{header['kind']}' checkpoint, expected '{kind}'")

    tensors = {}
    offset = 12 + header_len
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        array = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.astype(np.float32))
        offset += count * 4
    return tensors, header["meta"]


def prefixed(state: Dict[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    """Namespace a state dict so several modules share one checkpoint"""
    return {f"{prefix}.{name}": tensor for name, tensor in state.items()}


def unprefixed(tensors: Dict[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    """Inverse of prefixed"""
    start = len(prefix) + 1
    return {name[start:]: tensor for name, tensor in tensors.items() if name.startswith(prefix + ".")}


def pack_optimizer(optimizer: torch.optim.Optimizer, prefix: str) -> Tuple[Dict[str, torch.Tensor], list]:
    """Flatten optimizer state into tensors plus JSON param groups"""
    state_dict = optimizer.state_dict()
    tensors = {}
    for param_id, param_state in state_dict["state"].items():
        for key, value in param_state.items():
            value = value if torch.is_tensor(value) else torch.tensor(float(value))
            tensors[f"{prefix}.{param_id}.{key}"] = value
    groups = json.loads(json.dumps(state_dict["param_groups"], default=list))
    return tensors, groups


def unpack_optimizer(optimizer: torch.optim.Optimizer, tensors: Dict[str, torch.Tensor], groups: list, prefix: str):
    """Restore state packed by pack_optimizer"""
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for name, tensor in unprefixed(tensors, prefix).items():
        param_id, key = name.split(".", 1)
        state.setdefault(int(param_id), {})[key] = tensor.clone()
    optimizer.load_state_dict({"state": state, "param_groups": groups})
