"""Miniature decoder-only transformer with a swappable classification head.

Layout per layer: RMSNorm -> multi-head causal attention (separate q/k/v/o
projections, optional shared key/value heads) -> residual -> RMSNorm -> SwiGLU
MLP (gate/up/down) -> residual. Learned absolute positions live in the tail
rows of the single Embedding tensor. Weights are stored ``[out, in]``.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, VocabularyError

PAD_ID = 0
HEAD_INIT_STD = 0.02


class ParamType(str, enum.Enum):
    EMBEDDING = "Embedding"
    WQ = "Wq"
    WK = "Wk"
    WV = "Wv"
    WO = "Wo"
    MLP_GATE = "MlpGate"
    MLP_UP = "MlpUp"
    MLP_DOWN = "MlpDown"
    NORM = "Norm"
    HEAD = "Head"

    def __str__(self):
        return self.value


ALL_TYPES = frozenset(ParamType)
MLP_TYPES = frozenset({ParamType.MLP_GATE, ParamType.MLP_UP, ParamType.MLP_DOWN})
ATTN_TYPES = frozenset({ParamType.WQ, ParamType.WK, ParamType.WV, ParamType.WO})

_ALIASES = {
    "q": {ParamType.WQ}, "wq": {ParamType.WQ},
    "k": {ParamType.WK}, "wk": {ParamType.WK},
    "v": {ParamType.WV}, "wv": {ParamType.WV},
    "o": {ParamType.WO}, "wo": {ParamType.WO},
    "gate": {ParamType.MLP_GATE}, "mlpgate": {ParamType.MLP_GATE},
    "up": {ParamType.MLP_UP}, "mlpup": {ParamType.MLP_UP},
    "down": {ParamType.MLP_DOWN}, "mlpdown": {ParamType.MLP_DOWN},
    "mlp": set(MLP_TYPES),
    "w": set(ATTN_TYPES), "attn": set(ATTN_TYPES),
    "norm": {ParamType.NORM},
    "head": {ParamType.HEAD},
    "embedding": {ParamType.EMBEDDING}, "embed": {ParamType.EMBEDDING},
    "all": set(ATTN_TYPES | MLP_TYPES | {ParamType.NORM}),
}


def parse_types(spec):
    """Parse ``"Wv,Wo"``, ``"mlp"``, ``"all"`` ... into a frozenset of ParamType.

    ``all`` means every adaptable type: attention, MLP and norms (never the
    embedding or the head).
    """
    if isinstance(spec, (set, frozenset, list, tuple)):
        items = list(spec)
    else:
        items = [s for s in str(spec).replace("+", ",").split(",")]
    out = set()
    for item in items:
        if isinstance(item, ParamType):
            out.add(item)
            continue
        key = str(item).strip().lower().replace("_", "").replace(" ", "")
        if not key:
            continue
        if key not in _ALIASES:
            raise ConfigError(f"unknown parameter type {item!r}")
        out |= _ALIASES[key]
    return frozenset(out)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    head_dim: int = 8
    mlp_dim: int = 64
    max_seq_len: int = 64
    num_classes: int | None = None
    num_kv_heads: int | None = None

    def __post_init__(self):
        for f in ("vocab_size", "hidden_dim", "num_layers", "num_heads", "head_dim",
                  "mlp_dim", "max_seq_len"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ConfigError("hidden_dim must equal num_heads * head_dim")
        if self.num_classes is not None and self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if self.kv_heads < 1 or self.num_heads % self.kv_heads:
            raise ConfigError("num_kv_heads must divide num_heads")

    @property
    def kv_heads(self):
        return self.num_heads if self.num_kv_heads is None else self.num_kv_heads

    @property
    def kv_dim(self):
        return self.kv_heads * self.head_dim

    @property
    def head_rows(self):
        return self.vocab_size if self.num_classes is None else self.num_classes

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_shapes(config):
    """Manifest ``[(name, shape, ParamType, layer)]`` without allocating values."""
    d, kv, f = config.hidden_dim, config.kv_dim, config.mlp_dim
    out = [("embed", (config.vocab_size + config.max_seq_len, d), ParamType.EMBEDDING, -1)]
    for i in range(config.num_layers):
        p = f"layers.{i}."
        out += [
            (p + "attn_norm", (d,), ParamType.NORM, i),
            (p + "wq", (d, d), ParamType.WQ, i),
            (p + "wk", (kv, d), ParamType.WK, i),
            (p + "wv", (kv, d), ParamType.WV, i),
            (p + "wo", (d, d), ParamType.WO, i),
            (p + "mlp_norm", (d,), ParamType.NORM, i),
            (p + "mlp_gate", (f, d), ParamType.MLP_GATE, i),
            (p + "mlp_up", (f, d), ParamType.MLP_UP, i),
            (p + "mlp_down", (d, f), ParamType.MLP_DOWN, i),
        ]
    out += [
        ("final_norm", (d,), ParamType.NORM, config.num_layers),
        ("head", (config.head_rows, d), ParamType.HEAD, -1),
    ]
    return out


@dataclass
class ParamEntry:
    value: np.ndarray
    ptype: ParamType
    layer: int


class ParameterStore:
    """Ordered ``name -> float32 array`` map with a ParamType and layer per entry."""

    def __init__(self, config):
        self.config = config
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name, value, ptype, layer=-1):
        if name in self._entries:
            raise ConfigError(f"duplicate tensor name {name!r}")
        self._entries[name] = ParamEntry(np.ascontiguousarray(value, dtype=np.float32),
                                         ParamType(ptype), int(layer))

    def __getitem__(self, name):
        return self._entries[name].value

    def __setitem__(self, name, value):
        entry = self._entries[name]
        value = np.ascontiguousarray(value, dtype=np.float32)
        if value.shape != entry.value.shape:
            raise ConfigError(f"shape change for {name!r}: {entry.value.shape} -> {value.shape}")
        entry.value = value

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def entry(self, name):
        return self._entries[name]

    def items(self):
        return ((k, e.value) for k, e in self._entries.items())

    def entries(self):
        return self._entries.items()

    def ptype(self, name):
        return self._entries[name].ptype

    def names(self, types=None):
        return [k for k, e in self._entries.items() if types is None or e.ptype in types]

    @property
    def head_name(self):
        (name,) = self.names({ParamType.HEAD})
        return name

    @property
    def n(self):
        return sum(e.value.size for e in self._entries.values())

    def copy(self):
        out = ParameterStore(self.config)
        for k, e in self._entries.items():
            out.add(k, e.value.copy(), e.ptype, e.layer)
        return out

    def manifest(self):
        return [(k, e.value.shape, e.ptype, e.layer) for k, e in self._entries.items()]

    def fingerprint(self, include_head=False):
        """SHA-256 over the manifest and values (head excluded by default)."""
        h = hashlib.sha256()
        for k, e in self._entries.items():
            if e.ptype is ParamType.HEAD and not include_head:
                continue
            h.update(f"{k}|{e.ptype.value}|{e.layer}|{e.value.shape}\n".encode())
            h.update(e.value.astype("<f4").tobytes())
        return h.hexdigest()

    def bitwise_equal(self, other):
        if self.manifest() != other.manifest():
            return False
        return all(np.array_equal(v.view(np.uint32), other[k].view(np.uint32))
                   for k, v in self.items())


def init_params(config, seed=0):
    """Random pre-trained stand-in: projections N(0, 1/fan_in), embeddings N(0, 1), norms 1."""
    rng = np.random.default_rng(seed)
    store = ParameterStore(config)
    for name, shape, ptype, layer in param_shapes(config):
        if ptype is ParamType.NORM:
            value = np.ones(shape)
        elif ptype is ParamType.EMBEDDING:
            value = rng.standard_normal(shape)
        else:
            value = rng.standard_normal(shape) / np.sqrt(shape[1])
        store.add(name, value, ptype, layer)
    return store


def count_params(params, types=None):
    """Exact scalar count over a store or a ``param_shapes`` manifest, filtered by type."""
    if isinstance(params, ModelConfig):
        params = param_shapes(params)
    if isinstance(params, ParameterStore):
        params = params.manifest()
    total = 0
    for _, shape, ptype, _ in params:
        if types is None or ptype in types:
            total += int(np.prod(shape))
    return total


def swap_head(params, num_classes, init="random", class_token_ids=None, seed=0):
    """Replace the head with a ``[num_classes, d]`` classification head.

    ``init="vocab"`` copies the vocabulary-head rows of ``class_token_ids``;
    ``init="random"`` draws N(0, 0.02^2). The new head is a fresh array, never
    shared with the embedding table.
    """
    cfg = params.config
    d = cfg.hidden_dim
    old_head = params[params.head_name]
    if init == "vocab":
        ids = list(class_token_ids or [])
        if len(ids) != num_classes:
            raise ConfigError(f"need {num_classes} class token ids, got {len(ids)}")
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate class token ids {ids}")
        if any(i < 0 or i >= old_head.shape[0] for i in ids):
            raise VocabularyError(f"class token id outside vocabulary head of {old_head.shape[0]} rows")
        new_head = old_head[np.asarray(ids)].copy()
    elif init == "random":
        new_head = np.random.default_rng(seed).normal(0.0, HEAD_INIT_STD, size=(num_classes, d))
    else:
        raise ConfigError(f"unknown head init {init!r}")
    new_cfg = dataclasses.replace(cfg, num_classes=num_classes)
    out = ParameterStore(new_cfg)
    for k, e in params.entries():
        value = new_head if e.ptype is ParamType.HEAD else e.value.copy()
        out.add(k, value, e.ptype, e.layer)
    return out


def pad_batch(sequences, max_len=None):
    """Right-pad id sequences with PAD_ID; returns ``(ids[B, T], lengths[B])``."""
    seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
    if not seqs:
        raise InputError("empty batch")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if (lengths == 0).any():
        raise InputError("empty sequence in batch")
    width = int(lengths.max())
    if max_len is not None and width > max_len:
        raise InputError(f"sequence length {width} exceeds max_seq_len {max_len}")
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


def _lengths_from_padded(ids):
    nonpad = ids != PAD_ID
    if not nonpad.any(axis=1).all():
        raise InputError("empty sequence in batch")
    # last non-pad position + 1
    return ids.shape[1] - np.argmax(nonpad[:, ::-1], axis=1)


def _param(params, weights, name):
    if weights is not None and name in weights:
        return weights[name]
    return T.Tensor(params[name])


def hidden_states(params, ids, weights=None, dropout=0.0, rng=None):
    """Final-layer hidden states ``[B*T, d]`` (after the final norm) for padded ``ids[B, T]``.

    ``weights`` maps tensor names to Tensors that replace the stored values;
    adapters and trainable leaves enter the forward pass this way.
    """
    cfg = params.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise InputError("tokens must be a non-empty [batch, time] array")
    B, S = ids.shape
    if S > cfg.max_seq_len:
        raise InputError(f"sequence length {S} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise VocabularyError(f"token id outside vocabulary [0, {cfg.vocab_size})")
    H, Hkv, hd, d = cfg.num_heads, cfg.kv_heads, cfg.head_dim, cfg.hidden_dim
    if dropout and rng is None:
        rng = np.random.default_rng(0)

    embed = _param(params, weights, "embed")
    x = T.add(T.embedding_lookup(embed, ids),
              T.embedding_lookup(embed, cfg.vocab_size + np.arange(S)))
    x = T.reshape(x, (B * S, d))
    causal = np.tril(np.ones((S, S), dtype=bool))

    def proj(h, name):
        return T.matmul(h, T.transpose(_param(params, weights, name)))

    def heads(t, n):
        return T.transpose(T.reshape(t, (B, S, n, hd)), (0, 2, 1, 3))

    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        h = T.rmsnorm(x, _param(params, weights, p + "attn_norm"))
        q = heads(proj(h, p + "wq"), H)
        k = heads(proj(h, p + "wk"), Hkv)
        v = heads(proj(h, p + "wv"), Hkv)
        if Hkv != H:
            k = T.repeat_axis(k, H // Hkv, axis=1)
            v = T.repeat_axis(v, H // Hkv, axis=1)
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(hd))
        att = T.softmax(scores, mask=causal)
        att = T.dropout(att, dropout, rng)
        ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B * S, d))
        x = T.add(x, proj(ctx, p + "wo"))

        h = T.rmsnorm(x, _param(params, weights, p + "mlp_norm"))
        act = T.mul(T.silu(proj(h, p + "mlp_gate")), proj(h, p + "mlp_up"))
        act = T.dropout(act, dropout, rng)
        x = T.add(x, proj(act, p + "mlp_down"))

    return T.rmsnorm(x, _param(params, weights, "final_norm"))


def forward(params, tokens, weights=None, dropout=0.0, rng=None):
    """Classification logits ``[B, rows(head)]`` from each sequence's last non-pad token.

    ``tokens`` is either a list of id sequences or an already padded 2-D array.
    """
    if isinstance(tokens, np.ndarray) and tokens.ndim == 2:
        ids = tokens.astype(np.int64)
        lengths = _lengths_from_padded(ids)
    else:
        ids, lengths = pad_batch(tokens)
    B, S = ids.shape
    h = hidden_states(params, ids, weights, dropout, rng)
    last = T.slice_rows(h, np.arange(B) * S + lengths - 1)
    head = _param(params, weights, params.head_name)
    return T.matmul(last, T.transpose(head))
