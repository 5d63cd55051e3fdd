"""Baseline adapters sharing the training harness: LoRA, DoRA-lite, full FT, head-only."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError
from .fileio import decode_container, encode_container, atomic_write_bytes
from .model import ALL_TYPES, ParamType, parse_types

METHODS = ("sparta", "lora", "dora", "full", "head")
LORA_INIT_STD = 0.02
DEFAULT_LORA_TARGETS = frozenset({ParamType.WQ, ParamType.WV})


@dataclass(frozen=True)
class AdapterSpec:
    """What to train. ``targets`` defaults per method: all adaptable types for
    sparta, Wq/Wv for lora and dora, everything for full, nothing for head."""

    method: str = "sparta"
    density: float | None = None
    rank: int = 8
    alpha: float = 16.0
    targets: frozenset | None = None
    budget: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.targets is None:
            default = {"sparta": parse_types("all"), "lora": DEFAULT_LORA_TARGETS,
                       "dora": DEFAULT_LORA_TARGETS, "full": ALL_TYPES,
                       "head": frozenset({ParamType.HEAD})}[self.method]
            object.__setattr__(self, "targets", frozenset(default))
        else:
            object.__setattr__(self, "targets", parse_types(self.targets))
        if self.method == "sparta" and self.density is None and self.budget is None:
            raise ConfigError("sparta needs a density or a budget")
        if self.method in ("lora", "dora") and self.rank < 1:
            raise ConfigError("rank must be >= 1")

    def to_dict(self):
        return {"method": self.method, "density": self.density, "rank": self.rank,
                "alpha": self.alpha, "targets": sorted(t.value for t in self.targets),
                "budget": self.budget}


def full_ft_spec():
    return AdapterSpec("full")


def head_only_spec():
    return AdapterSpec("head")


@dataclass
class LoraAdapter:
    """Per-target low-rank factors; effective delta is ``(alpha / rank) * B @ A``.

    ``magnitude`` is populated only for DoRA-lite.
    """

    rank: int
    alpha: float
    A: dict = field(default_factory=dict)
    B: dict = field(default_factory=dict)
    magnitude: dict = field(default_factory=dict)

    @property
    def scaling(self):
        return self.alpha / self.rank

    @property
    def dora(self):
        return bool(self.magnitude)

    @property
    def names(self):
        return list(self.A)

    @property
    def num_params(self):
        return sum(a.size for a in self.A.values()) + sum(b.size for b in self.B.values()) + \
            sum(m.size for m in self.magnitude.values())

    def arrays(self):
        """Trainable arrays in a stable order: ``[(key, array)]``."""
        out = []
        for name in self.A:
            out.append((name + ".A", self.A[name]))
            out.append((name + ".B", self.B[name]))
            if name in self.magnitude:
                out.append((name + ".m", self.magnitude[name]))
        return out

    def copy(self):
        return LoraAdapter(self.rank, self.alpha, {k: v.copy() for k, v in self.A.items()},
                           {k: v.copy() for k, v in self.B.items()},
                           {k: v.copy() for k, v in self.magnitude.items()})


def init_lora(params, targets=DEFAULT_LORA_TARGETS, rank=8, alpha=16.0, seed=0, dora=False):
    """A ~ N(0, 0.02^2), B = 0, so the adapted model starts identical to the base."""
    targets = parse_types(targets)
    rng = np.random.default_rng(seed)
    ad = LoraAdapter(rank, float(alpha))
    names = [k for k, e in params.entries() if e.ptype in targets]
    if not names:
        raise ConfigError("LoRA target filter matches no tensors")
    for name in names:
        W = params[name]
        if W.ndim != 2:
            continue
        out_dim, in_dim = W.shape
        if rank >= min(out_dim, in_dim):
            raise ConfigError(f"rank {rank} is not low-rank for {name} of shape {list(W.shape)}")
        ad.A[name] = rng.normal(0.0, LORA_INIT_STD, size=(rank, in_dim)).astype(np.float32)
        ad.B[name] = np.zeros((out_dim, rank), dtype=np.float32)
        if dora:
            ad.magnitude[name] = T.column_norms(W.astype(np.float32))
    return ad


def lora_forward_weight(W, A, B, rank, alpha):
    """``W + (alpha / rank) * B @ A`` as a taped Tensor."""
    W, A, B = T.as_tensor(W), T.as_tensor(A), T.as_tensor(B)
    out_dim, in_dim = W.shape
    if rank >= min(out_dim, in_dim):
        raise ConfigError(f"rank {rank} is not low-rank for a {out_dim}x{in_dim} weight")
    if A.shape != (rank, in_dim) or B.shape != (out_dim, rank):
        raise ConfigError(f"factor shapes A{list(A.shape)} B{list(B.shape)} do not fit "
                          f"W{[out_dim, in_dim]} at rank {rank}")
    return T.add(W, T.scale(T.matmul(B, A), alpha / rank))


def dora_lite_forward_weight(W, A, B, magnitude, rank, alpha):
    """``magnitude * column_normalize(W + (alpha / rank) * B @ A)``."""
    return T.column_normalize_scale(lora_forward_weight(W, A, B, rank, alpha), magnitude)


def adapter_weights(params, adapter, leaves=None):
    """Effective-weight Tensors for every adapted tensor, ready for ``forward(weights=...)``.

    ``leaves`` maps ``"<name>.A"``-style keys to trainable Tensors; missing keys
    are wrapped as constants.
    """
    leaves = leaves or {}
    out = {}
    for name in adapter.names:
        A = leaves.get(name + ".A", adapter.A[name])
        B = leaves.get(name + ".B", adapter.B[name])
        if name in adapter.magnitude:
            m = leaves.get(name + ".m", adapter.magnitude[name])
            out[name] = dora_lite_forward_weight(params[name], A, B, m, adapter.rank, adapter.alpha)
        else:
            out[name] = lora_forward_weight(params[name], A, B, adapter.rank, adapter.alpha)
    return out


def merge_lora(params, adapter, head=None):
    """Fold the adapter into a standalone store."""
    out = params.copy()
    for name, w in adapter_weights(params, adapter).items():
        out[name] = w.data
    if head is not None:
        out[out.head_name] = head
    return out


def lora_param_count(num_layers, hidden_dim, kv_dim, rank, targets=DEFAULT_LORA_TARGETS):
    """LoRA trainable scalars on a bias-free geometry: q/o are ``d x d``, k/v are ``kv x d``.

    Only attention projections are counted. For 18 layers, d=2048, kv=256,
    r=8 on Wq and Wv this is 921,600.
    """
    targets = parse_types(targets)
    dims = {ParamType.WQ: (hidden_dim, hidden_dim), ParamType.WK: (kv_dim, hidden_dim),
            ParamType.WV: (kv_dim, hidden_dim), ParamType.WO: (hidden_dim, hidden_dim)}
    return sum(num_layers * rank * sum(dims[t]) for t in targets if t in dims)


def trainable_count(params, spec, index_set=None, adapter=None, include_head=True):
    """Trainable scalars for ``spec``; the dense classification head counts unless excluded."""
    head = params[params.head_name].size if include_head else 0
    if spec.method == "full":
        types = spec.targets - {ParamType.HEAD}
        return sum(v.size for k, v in params.items() if params.ptype(k) in types) + head
    if spec.method == "head":
        return head
    if spec.method == "sparta":
        if index_set is None:
            raise ConfigError("sparta trainable count needs the sampled index set")
        return index_set.m + head
    if adapter is None:
        raise ConfigError(f"{spec.method} trainable count needs the adapter")
    return adapter.num_params + head


LORA_KIND = "lora"


def lora_bytes(adapter, fingerprint, head=None, method="lora"):
    header = {"rank": adapter.rank, "alpha": adapter.alpha, "method": method,
              "fingerprint": fingerprint, "targets": adapter.names, "has_head": head is not None}
    arrays = list(adapter.arrays())
    if head is not None:
        arrays.append(("head", np.asarray(head, dtype=np.float32)))
    return encode_container(LORA_KIND, header, arrays, align=64)


def save_lora(path, adapter, fingerprint, head=None, method="lora"):
    atomic_write_bytes(path, lora_bytes(adapter, fingerprint, head, method))


def load_lora(source):
    """Returns ``(adapter, head, header)``."""
    data = source if isinstance(source, (bytes, bytearray)) else open(source, "rb").read()
    header, arrays = decode_container(bytes(data), LORA_KIND)
    ad = LoraAdapter(header["rank"], header["alpha"])
    try:
        for name in header["targets"]:
            ad.A[name] = arrays[name + ".A"]
            ad.B[name] = arrays[name + ".B"]
            if name + ".m" in arrays:
                ad.magnitude[name] = arrays[name + ".m"]
    except KeyError as exc:
        raise FormatError(f"LoRA file missing array {exc}") from exc
    head = arrays.get("head") if header.get("has_head") else None
    return ad, head, header
