"""Model checkpoints: config + ordered tensor manifest + 64-byte aligned float32 payloads."""

from __future__ import annotations

import numpy as np

from .errors import FormatError
from .fileio import decode_container, encode_container, read_container, write_container
from .model import ModelConfig, ParameterStore, ParamType

KIND = "checkpoint"
ALIGN = 64


def _header(params, meta):
    tensors = [{"name": k, "type": e.ptype.value, "layer": e.layer, "shape": list(e.value.shape)}
               for k, e in params.entries()]
    return {"config": params.config.to_dict(), "tensors": tensors, "meta": meta or {}}


def checkpoint_bytes(params, meta=None):
    return encode_container(KIND, _header(params, meta), list(params.items()), align=ALIGN)


def save_checkpoint(path, params, meta=None):
    """Write ``params`` atomically; ``meta`` is any JSON-serializable dict (e.g. a vocabulary)."""
    write_container(path, KIND, _header(params, meta), list(params.items()), align=ALIGN)


def _store_from(header, arrays):
    store = ParameterStore(ModelConfig.from_dict(header["config"]))
    for t in header["tensors"]:
        arr = arrays.get(t["name"])
        if arr is None or list(arr.shape) != t["shape"] or arr.dtype != np.float32:
            raise FormatError(f"tensor {t['name']!r} missing or malformed")
        store.add(t["name"], arr, ParamType(t["type"]), t["layer"])
    return store


def load_checkpoint(path, with_meta=False):
    header, arrays = read_container(path, KIND)
    store = _store_from(header, arrays)
    return (store, header.get("meta", {})) if with_meta else store


def checkpoint_from_bytes(data):
    header, arrays = decode_container(data, KIND)
    return _store_from(header, arrays)
