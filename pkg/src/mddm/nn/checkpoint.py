"""Named-array checkpoint container.

A checkpoint is an ``.npz`` archive holding one array per layer path plus a
JSON header (``__header__``) with the format name, version, the shape/dtype of
every array and arbitrary JSON extras. Writes are atomic (temp file + rename).
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from ..errors import InputError

CHECKPOINT_FORMAT = "mddm-checkpoint"
CHECKPOINT_VERSION = 1
_HEADER = "__header__"


def _to_numpy(t):
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().numpy()
    return np.asarray(t)


def save_arrays(path, arrays: dict, extras: dict | None = None) -> Path:
    path = Path(path)
    arrays = {k: _to_numpy(v) for k, v in arrays.items()}
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in arrays.items()},
        "extras": extras or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".npz")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **{_HEADER: np.array(json.dumps(header))}, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_arrays(path) -> tuple[dict, dict]:
    """Returns ``(arrays, extras)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        if _HEADER not in data.files:
            raise InputError(f"{path}: missing checkpoint header")
        header = json.loads(str(data[_HEADER]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise InputError(f"{path}: not an mddm checkpoint")
        if header["version"] > CHECKPOINT_VERSION:
            raise InputError(f"{path}: checkpoint version {header['version']} is newer than supported")
        arrays = {k: data[k] for k in header["arrays"]}
    for k, meta in header["arrays"].items():
        if list(arrays[k].shape) != meta["shape"]:
            raise InputError(f"{path}: array {k} shape does not match header")
    return arrays, header["extras"]


def save_module(path, module: torch.nn.Module, extras: dict | None = None) -> Path:
    return save_arrays(path, module.state_dict(), extras)


def load_module(path, module: torch.nn.Module) -> dict:
    arrays, extras = load_arrays(path)
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    module.load_state_dict(state)
    return extras
