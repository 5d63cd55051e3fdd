"""Sparse random parameter adaptation: index sampling, sparse deltas, merge/unmerge.

A run samples an :class:`IndexSet` of scalar coordinates from the targeted
tensors with independent Bernoulli draws, trains a zero-initialized
:class:`SparseDelta` aligned with it, and adds the delta into the frozen
weights only for the duration of each forward/backward pass.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ConsistencyError, EncodingError, FormatError, StateError
from .fileio import (bf16_bits_to_f32, decode_container, encode_container, f32_to_bf16_bits,
                     header_size, atomic_write_bytes)
from .model import ParamType, parse_types

MAX_INDEXED_DIM = 65536
FORBIDDEN_TARGETS = frozenset({ParamType.EMBEDDING, ParamType.HEAD})


@dataclass(frozen=True)
class SparsityConfig:
    density: float
    targets: frozenset = field(default_factory=lambda: parse_types("all"))
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.density <= 1.0):
            raise ConfigError(f"density must be in (0, 1], got {self.density}")
        object.__setattr__(self, "targets", parse_types(self.targets))
        if not self.targets:
            raise ConfigError("empty target filter")
        bad = self.targets & FORBIDDEN_TARGETS
        if bad:
            raise ConfigError(f"{sorted(t.value for t in bad)} cannot be sparsified "
                              "(embeddings stay frozen, the head is trained densely)")

    @property
    def sparsity(self):
        return 1.0 - self.density


@dataclass(frozen=True)
class TensorIndex:
    """Sorted unique coordinates into one tensor; ``cols`` is empty for 1-D tensors."""

    name: str
    shape: tuple
    rows: np.ndarray
    cols: np.ndarray

    @property
    def m(self):
        return int(self.rows.shape[0])

    @property
    def flat(self):
        if len(self.shape) == 1:
            return self.rows.astype(np.int64)
        return self.rows.astype(np.int64) * self.shape[1] + self.cols.astype(np.int64)

    def validate(self):
        if len(self.shape) == 2 and self.cols.shape != self.rows.shape:
            raise ConsistencyError(f"{self.name}: rows/cols length mismatch")
        if len(self.shape) == 1 and self.cols.size:
            raise ConsistencyError(f"{self.name}: 1-D tensor with column indices")
        flat = self.flat
        if flat.size and (np.any(np.diff(flat) <= 0) or flat[0] < 0 or flat[-1] >= np.prod(self.shape)):
            raise ConsistencyError(f"{self.name}: coordinates unsorted, duplicated or out of range")


@dataclass(frozen=True)
class IndexSet:
    tensors: dict  # name -> TensorIndex, manifest order
    density: float
    seed: int
    targets: frozenset

    @property
    def m(self):
        return sum(t.m for t in self.tensors.values())

    def __iter__(self):
        return iter(self.tensors.values())

    def to_bytes(self):
        parts = []
        for t in self.tensors.values():
            parts.append(f"{t.name}:{t.m}:{list(t.shape)}\n".encode())
            parts.append(t.rows.astype("<u2").tobytes())
            parts.append(t.cols.astype("<u2").tobytes())
        return b"".join(parts)

    def digest(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def validate_against(self, params):
        for t in self.tensors.values():
            if t.name not in params or tuple(params[t.name].shape) != tuple(t.shape):
                raise ConsistencyError(f"index set does not match tensor {t.name!r}")
            t.validate()


class SparseDelta:
    """Trainable values aligned one-to-one with an IndexSet."""

    def __init__(self, values):
        self.values = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in values.items()}

    @classmethod
    def zeros(cls, index_set):
        return cls({t.name: np.zeros(t.m, dtype=np.float32) for t in index_set})

    @property
    def m(self):
        return sum(v.size for v in self.values.values())

    def copy(self):
        return SparseDelta({k: v.copy() for k, v in self.values.items()})

    def flat_view(self):
        """Concatenated values (a copy); see :meth:`assign_flat` for the inverse."""
        if not self.values:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate(list(self.values.values()))

    def assign_flat(self, flat):
        offset = 0
        for k, v in self.values.items():
            v[...] = flat[offset: offset + v.size]
            offset += v.size

    def to_dense(self, index_set, shapes):
        """Scatter into zero tensors: ``{name: dense array}``."""
        out = {}
        for t in index_set:
            dense = np.zeros(shapes[t.name], dtype=np.float32)
            dense.reshape(-1)[t.flat] = self.values[t.name]
            out[t.name] = dense
        return out


def _stream_seed(seed, name):
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.SeedSequence([int(seed) & (2**64 - 1), key])


def _check_dims(name, shape):
    if len(shape) not in (1, 2):
        raise EncodingError(f"{name}: only 1-D and 2-D tensors can be indexed")
    if any(dim > MAX_INDEXED_DIM for dim in shape):
        raise EncodingError(f"{name}: dimension {max(shape)} exceeds the 16-bit index "
                            f"format limit of {MAX_INDEXED_DIM}")


def targeted_names(params, targets):
    return [k for k, e in params.entries() if e.ptype in targets]


def sample_indices(params, cfg):
    """Bernoulli(k) selection of every scalar in the targeted tensors.

    Each tensor draws from its own stream keyed by ``(seed, name)``, so the
    selection in one tensor does not depend on which other tensors are targeted.
    """
    names = targeted_names(params, cfg.targets)
    if not names:
        raise ConfigError("target filter matches no tensors")
    tensors = {}
    for name in names:
        shape = tuple(params[name].shape)
        _check_dims(name, shape)
        rng = np.random.default_rng(_stream_seed(cfg.seed, name))
        flat = np.flatnonzero(rng.random(int(np.prod(shape))) < cfg.density)
        if len(shape) == 2:
            rows, cols = np.divmod(flat, shape[1])
        else:
            rows, cols = flat, np.zeros(0, dtype=np.int64)
        tensors[name] = TensorIndex(name, shape, rows.astype(np.uint16), cols.astype(np.uint16))
    return IndexSet(tensors, cfg.density, cfg.seed, cfg.targets)


def n_targeted(params, targets):
    return sum(params[k].size for k in targeted_names(params, parse_types(targets)))


def choose_density(budget, n_target):
    """Density whose expected trainable count equals ``budget``."""
    if budget <= 0:
        raise ConfigError("budget must be positive")
    if budget > n_target:
        raise ConfigError(f"budget {budget} exceeds target capacity {n_target}")
    return budget / n_target


def sample_for_budget(params, targets, budget, seed=0, tol=0.02, max_tries=10000):
    """Sample an IndexSet whose realized size is within ``tol`` of ``budget``.

    Density is fixed at ``budget / n_targeted``; seeds ``seed, seed+1, ...`` are
    tried until the Bernoulli draw lands inside the tolerance. The accepted seed
    is stored on the IndexSet, so it stays reproducible from ``(seed, k, targets)``.
    """
    targets = parse_types(targets)
    k = choose_density(budget, n_targeted(params, targets))
    for attempt in range(max_tries):
        phi = sample_indices(params, SparsityConfig(k, targets, seed + attempt))
        if abs(phi.m - budget) <= tol * budget:
            return phi
    raise ConfigError(f"no seed within {max_tries} tries gave |m - {budget}| <= {tol:.0%}")


def _check_aligned(params, index_set, delta):
    for t in index_set:
        if t.name not in params:
            raise ConsistencyError(f"unknown tensor {t.name!r}")
        if tuple(params[t.name].shape) != tuple(t.shape):
            raise ConsistencyError(f"{t.name}: shape {params[t.name].shape} != index shape {t.shape}")
        v = delta.values.get(t.name)
        if v is None or v.shape != (t.m,):
            raise ConsistencyError(f"{t.name}: delta length does not match {t.m} indices")


def merge(params, index_set, delta):
    """``theta[phi] += delta`` in place."""
    _check_aligned(params, index_set, delta)
    for t in index_set:
        kernels.scatter_add(params[t.name].reshape(-1), t.flat, delta.values[t.name], 1)


def unmerge(params, index_set, delta):
    """``theta[phi] -= delta`` in place. Never recorded on a tape."""
    _check_aligned(params, index_set, delta)
    for t in index_set:
        kernels.scatter_add(params[t.name].reshape(-1), t.flat, delta.values[t.name], -1)


@contextlib.contextmanager
def merged(params, index_set, delta):
    """Merge for the duration of the block, then restore the pre-merge values exactly.

    Float32 ``(a + d) - d`` is not always ``a``; restoring the saved values keeps
    the frozen weights bitwise stable across any number of training steps.
    """
    _check_aligned(params, index_set, delta)
    saved = [(t, kernels.gather(params[t.name].reshape(-1), t.flat)) for t in index_set]
    merge(params, index_set, delta)
    try:
        yield params
    finally:
        for t, vals in saved:
            kernels.scatter_set(params[t.name].reshape(-1), t.flat, vals)


def gather_grads(grads, index_set):
    """Dense gradients at the indexed coordinates, in IndexSet order.

    ``grads`` maps tensor name to a gradient array (or a Tensor with ``.grad``).
    """
    out = {}
    for t in index_set:
        g = grads.get(t.name)
        if g is not None and hasattr(g, "grad"):
            g = g.grad
        if g is None:
            raise StateError(f"no gradient for {t.name!r}; run backward first")
        out[t.name] = kernels.gather(np.ascontiguousarray(g, dtype=np.float32).reshape(-1), t.flat)
    return SparseDelta(out)


def inference_merge(params, index_set, delta, head=None):
    """A standalone store with the delta (and trained head) folded in permanently."""
    out = params.copy()
    merge(out, index_set, delta)
    if head is not None:
        out[out.head_name] = head
    return out


# -- sparse-delta files -------------------------------------------------------

SPARSE_KIND = "sparse-delta"
INDEX_KIND = "index-set"


def _index_header(index_set):
    return {
        "density": index_set.density,
        "sparsity": 1.0 - index_set.density,
        "seed": index_set.seed,
        "targets": sorted(t.value for t in index_set.targets),
        "tensors": [{"name": t.name, "m": t.m, "shape": list(t.shape)} for t in index_set],
    }


def sparse_delta_bytes(index_set, delta, fingerprint, head=None, mode="explicit",
                       value_dtype="bf16"):
    """Encode a delta. ``explicit`` stores u16 rows/cols; ``seed`` stores only values.

    With ``value_dtype="bf16"`` an explicit 2-D entry costs 3 x 16 bits; ``f32``
    keeps trained values losslessly at 16 + 16 + 32 bits.
    """
    if mode not in ("explicit", "seed"):
        raise ConfigError(f"unknown sparse-delta mode {mode!r}")
    if value_dtype not in ("bf16", "f32"):
        raise ConfigError(f"unknown value dtype {value_dtype!r}")
    header = _index_header(index_set)
    header.update({"fingerprint": fingerprint, "mode": mode, "value_dtype": value_dtype,
                   "has_head": head is not None})
    arrays = []
    for t in index_set:
        if mode == "explicit":
            arrays.append((t.name + ".rows", t.rows.astype(np.uint16)))
            if len(t.shape) == 2:
                arrays.append((t.name + ".cols", t.cols.astype(np.uint16)))
        vals = delta.values[t.name]
        arrays.append((t.name + ".values",
                       f32_to_bf16_bits(vals) if value_dtype == "bf16" else vals.astype(np.float32)))
    if head is not None:
        arrays.append(("head", np.asarray(head, dtype=np.float32)))
    return encode_container(SPARSE_KIND, header, arrays, align=1)


def save_sparse_delta(path, index_set, delta, fingerprint, head=None, mode="explicit",
                      value_dtype="bf16"):
    data = sparse_delta_bytes(index_set, delta, fingerprint, head, mode, value_dtype)
    atomic_write_bytes(path, data)
    return len(data)


def load_sparse_delta(source, params=None):
    """Returns ``(index_set, delta, head, header)``.

    Seed-mode files regenerate the indices from ``params``, whose fingerprint
    must match the one recorded at save time.
    """
    data = source if isinstance(source, (bytes, bytearray)) else open(source, "rb").read()
    header, arrays = decode_container(bytes(data), SPARSE_KIND)
    targets = parse_types(header["targets"])
    if header["mode"] == "seed":
        if params is None:
            raise ConfigError("seed-mode sparse delta needs the base model to rebuild indices")
        if params.fingerprint() != header["fingerprint"]:
            raise FormatError("base model fingerprint does not match the sparse delta")
        index_set = sample_indices(params, SparsityConfig(header["density"], targets, header["seed"]))
    else:
        tensors = {}
        for t in header["tensors"]:
            shape = tuple(t["shape"])
            rows = arrays[t["name"] + ".rows"]
            cols = arrays[t["name"] + ".cols"] if len(shape) == 2 else np.zeros(0, dtype=np.uint16)
            tensors[t["name"]] = TensorIndex(t["name"], shape, rows, cols)
        index_set = IndexSet(tensors, header["density"], header["seed"], targets)
    for t in index_set:
        t.validate()
    values = {}
    for t in header["tensors"]:
        raw = arrays[t["name"] + ".values"]
        values[t["name"]] = bf16_bits_to_f32(raw) if header["value_dtype"] == "bf16" else raw
        if values[t["name"]].shape != (index_set.tensors[t["name"]].m,):
            raise FormatError(f"{t['name']}: value count does not match indices")
    head = arrays.get("head") if header.get("has_head") else None
    if params is not None:
        index_set.validate_against(params)
    return index_set, SparseDelta(values), head, header


def payload_breakdown(data):
    """Byte counts ``{"header", "index_values", "head"}`` of an encoded sparse delta."""
    header, arrays = decode_container(bytes(data), SPARSE_KIND)
    head = arrays["head"].nbytes if "head" in arrays else 0
    return {"header": header_size(data), "index_values": len(data) - header_size(data) - head,
            "head": head}


def index_set_bytes(index_set, fingerprint):
    header = _index_header(index_set)
    header["fingerprint"] = fingerprint
    arrays = []
    for t in index_set:
        arrays.append((t.name + ".rows", t.rows.astype(np.uint16)))
        if len(t.shape) == 2:
            arrays.append((t.name + ".cols", t.cols.astype(np.uint16)))
    return encode_container(INDEX_KIND, header, arrays, align=1)


def load_index_set(path):
    with open(path, "rb") as fh:
        header, arrays = decode_container(fh.read(), INDEX_KIND)
    tensors = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        cols = arrays[t["name"] + ".cols"] if len(shape) == 2 else np.zeros(0, dtype=np.uint16)
        tensors[t["name"]] = TensorIndex(t["name"], shape, arrays[t["name"] + ".rows"], cols)
    return IndexSet(tensors, header["density"], header["seed"], parse_types(header["targets"])), header
