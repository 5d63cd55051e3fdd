"""Rank of fine-tuning deltas and random drop of dense deltas.

Rank is the number of singular values above ``tol * sigma_max`` of
``W_FT - W_PT``, computed in float64 with the one-sided Jacobi kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .adapter import IndexSet, SparseDelta, TensorIndex, _check_dims, _stream_seed
from .errors import ConfigError, DimensionError, PairingError
from .model import ParameterStore, ParamType

DEFAULT_TOL = 1e-5
DROP_STREAM = "drop:"


def singular_values(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"singular values need a 2-D matrix, got shape {list(a.shape)}")
    return kernels.jacobi_singular_values(a)


def matrix_rank(a, tol=DEFAULT_TOL):
    s = singular_values(a)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def delta_rank(w_pt, w_ft, tol=DEFAULT_TOL):
    w_pt, w_ft = np.asarray(w_pt), np.asarray(w_ft)
    if w_pt.shape != w_ft.shape:
        raise DimensionError(f"shape mismatch: {list(w_pt.shape)} vs {list(w_ft.shape)}")
    # f32 - f32 is exact in f64
    return matrix_rank(w_ft.astype(np.float64) - w_pt.astype(np.float64), tol)


@dataclass(frozen=True)
class RankEntry:
    name: str
    ptype: str
    layer: int
    dims: tuple
    rank: int
    tol: float

    @property
    def deficiency(self):
        return min(self.dims) - self.rank


@dataclass
class RankReport:
    entries: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    tol: float = DEFAULT_TOL

    def to_dict(self):
        return {"tol": self.tol, "skipped": self.skipped,
                "entries": [{"name": e.name, "type": e.ptype, "layer": e.layer,
                             "dims": list(e.dims), "rank": e.rank,
                             "deficiency": e.deficiency} for e in self.entries]}


def check_pair(pt, ft):
    if pt.manifest() != ft.manifest():
        a = {k: (s, t) for k, s, t, _ in pt.manifest()}
        b = {k: (s, t) for k, s, t, _ in ft.manifest()}
        diff = sorted(set(a) ^ set(b)) or sorted(k for k in a if a[k] != b.get(k))
        raise PairingError(f"checkpoints do not pair: mismatched tensors {diff[:5]}")


def align_heads(pt, ft):
    """Drop the heads from both stores when they are the only tensors that differ in shape.

    A task model carries a class head in place of the base model's vocabulary head;
    its other tensors still pair. Returns ``(pt, ft, dropped)`` and shares the arrays.
    """
    heads = set(pt.names({ParamType.HEAD})) | set(ft.names({ParamType.HEAD}))
    keep = [k for k, *_ in pt.manifest() if k not in heads]
    if not heads or pt.manifest() == ft.manifest() or \
            [m for m in pt.manifest() if m[0] in keep] != [m for m in ft.manifest() if m[0] in keep]:
        return pt, ft, False
    out = []
    for store in (pt, ft):
        trimmed = ParameterStore(store.config)
        for k in keep:
            e = store.entry(k)
            trimmed.add(k, e.value, e.ptype, e.layer)
        out.append(trimmed)
    return out[0], out[1], True


def rank_report(pt, ft, tol=DEFAULT_TOL):
    """One entry per 2-D tensor in manifest order; other tensors are listed as skipped."""
    check_pair(pt, ft)
    report = RankReport(tol=tol)
    for name, e in pt.entries():
        if e.value.ndim != 2:
            report.skipped.append(name)
            continue
        r = delta_rank(e.value, ft[name], tol)
        report.entries.append(RankEntry(name, e.ptype.value, e.layer, tuple(e.value.shape), r, tol))
    return report


def _span(values):
    lo, hi = min(values), max(values)
    return f"{lo}" if lo == hi else f"{lo} - {hi}"


def format_rank_table(report, per_tensor=False):
    """Grouped by tensor type: dims, layer range, rank range, deficiency range."""
    head = f"{'Weight matrix':<16} {'dims':<16} {'Layer(s)':<10} {'Rank(s)':<14} Rank deficiencies"
    lines = [head, "-" * len(head)]
    if per_tensor:
        for e in report.entries:
            defi = "0 (full rank)" if e.deficiency == 0 else str(e.deficiency)
            lines.append(f"{e.name:<16} {str(list(e.dims)):<16} {e.layer if e.layer >= 0 else '-':<10} "
                         f"{e.rank:<14} {defi}")
    else:
        groups = {}
        for e in report.entries:
            groups.setdefault((e.ptype, e.dims), []).append(e)
        for (ptype, dims), items in groups.items():
            layers = [e.layer for e in items if e.layer >= 0]
            ranks = sorted({e.rank for e in items}, reverse=True)
            defs = sorted({e.deficiency for e in items})
            defi = "0 (full rank)" if defs == [0] else _span(defs)
            lines.append(f"{ptype:<16} {str(list(dims)):<16} {_span(layers) if layers else '-':<10} "
                         f"{_span(ranks) if len(ranks) > 1 else str(ranks[0]):<14} {defi}")
    if report.skipped:
        lines.append(f"skipped (not 2-D): {', '.join(report.skipped)}")
    lines.append(f"tolerance: {report.tol:g} x sigma_max")
    return "\n".join(lines) + "\n"


def random_drop(deltas, p, rescale=False, seed=0):
    """Keep each non-zero delta entry with probability ``1 - p``.

    ``deltas`` is a dense array or ``{name: array}``. With ``rescale`` the kept
    values are multiplied by ``1 / (1 - p)`` so the expected reconstruction equals
    the input. Returns ``(IndexSet, SparseDelta)``.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"drop probability must be in [0, 1), got {p}")
    if not isinstance(deltas, dict):
        deltas = {"delta": deltas}
    factor = np.float32(1.0 / (1.0 - p))
    tensors, values = {}, {}
    for name, dense in deltas.items():
        dense = np.ascontiguousarray(dense, dtype=np.float32)
        shape = tuple(dense.shape)
        _check_dims(name, shape)
        flat = dense.reshape(-1)
        # separate stream: reusing the sampling stream would anti-correlate with a SpaRTA support
        rng = np.random.default_rng(_stream_seed(seed, DROP_STREAM + name))
        keep = (rng.random(flat.size) >= p) & (flat != 0)
        idx = np.flatnonzero(keep)
        if len(shape) == 2:
            rows, cols = np.divmod(idx, shape[1])
        else:
            rows, cols = idx, np.zeros(0, dtype=np.int64)
        tensors[name] = TensorIndex(name, shape, rows.astype(np.uint16), cols.astype(np.uint16))
        vals = flat[idx]
        values[name] = vals * factor if rescale else vals.copy()
    return IndexSet(tensors, 1.0 - p, seed, frozenset()), SparseDelta(values)
