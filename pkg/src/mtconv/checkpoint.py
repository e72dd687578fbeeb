"""Checkpoint container: concatenated MTN1 tensors plus a JSON index.

``<file>`` holds the tensors back to back; ``<file>.index.json`` maps every
parameter path to its byte offset and shape.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import ParamStore, Tensor, TensorFormatError, decode_tensor, encode_tensor


class CheckpointError(OSError):
    pass


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def index_path(path) -> Path:
    return Path(f"{path}.index.json")


def save_checkpoint(store: ParamStore | Mapping[str, np.ndarray], path) -> dict:
    items = store.items() if isinstance(store, ParamStore) else store.items()
    blob = bytearray()
    index = {}
    for name, value in items:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        index[name] = {"offset": len(blob), "shape": list(arr.shape)}
        blob += encode_tensor(arr)
    atomic_write(path, bytes(blob))
    atomic_write(index_path(path), json.dumps(index, indent=1) + "\n")
    return index


def load_arrays(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
        with open(index_path(path)) as fh:
            index = json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    arrays = {}
    for name, entry in index.items():
        try:
            arr, _ = decode_tensor(blob, int(entry["offset"]))
        except TensorFormatError as exc:
            raise CheckpointError(f"checkpoint {path}, tensor {name!r}: {exc}") from None
        if list(arr.shape) != list(entry["shape"]):
            raise CheckpointError(f"checkpoint {path}: tensor {name!r} has shape {arr.shape}, "
                                  f"index says {entry['shape']} (byte offset {entry['offset']})")
        arrays[name] = arr
    return arrays


def load_checkpoint(path) -> ParamStore:
    return ParamStore((name, Tensor(arr)) for name, arr in load_arrays(path).items())


def checkpoint_io(store: ParamStore | None, path, direction: str):
    """``direction='save'`` writes ``store``; ``'load'`` returns a new ParamStore."""
    if direction == "save":
        save_checkpoint(store, path)
        return True
    if direction == "load":
        return load_checkpoint(path)
    raise ValueError(f"direction must be 'save' or 'load', got {direction!r}")
