"""Model checkpoints: one .npz of parameter arrays plus a JSON header."""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .layers import Module


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str, module: Module, meta: dict | None = None):
    arrays = module.state_arrays()
    header = json.dumps({"meta": meta or {}, "names": sorted(arrays)},
                        sort_keys=True)
    np.savez(path, __header__=np.frombuffer(header.encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise CheckpointError(f"missing checkpoint {path}")
    header = json.loads(bytes(data["__header__"]).decode())
    arrays = {name: data[name] for name in data.files if name != "__header__"}
    missing = set(header["names"]) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint {path} missing arrays {missing}")
    return arrays, header["meta"]


def restore(module: Module, path: str) -> dict:
    arrays, meta = load_checkpoint(path)
    module.load_state_arrays(arrays)
    return meta


def file_checksum(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
