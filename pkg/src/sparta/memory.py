"""Training-memory accounting for sparse random adaptation versus full fine-tuning.

With ``b``-bit values and 16-bit indices, for ``n`` parameters and density ``k``
(``m = k n`` trainable):

* full fine-tuning with Adam holds values, gradients and two moments: ``4 n b``
* sparse adaptation holds Adam state for the delta (``4 m b``), two indices per
  entry (``2 m 16``) and the frozen model (``n b``)
* the stored adapter costs ``m (2*16 + b)`` on top of the base model

At ``b = 16`` the sparse side is ``2n(1 + 6k)`` bytes and beats full FT iff ``k < 0.5``.
Buffers and activations are not modeled.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction

from .errors import ConfigError, NoSavings

INDEX_BITS = 16


@dataclass(frozen=True)
class MemoryReport:
    n: float
    m: float
    k: float
    bits_per_value: int
    storage_bytes: float
    fullft_train_bytes: float
    sparta_train_bytes: float
    extra_adapter_bytes: float
    savings_fraction: float
    breakeven: bool

    @staticmethod
    def gb(x):
        return round(x / 1e9, 1)

    def view(self):
        """Rounded GB figures as shown in the report table."""
        return {"storage_gb": self.gb(self.storage_bytes),
                "fullft_gb": self.gb(self.fullft_train_bytes),
                "sparta_gb": self.gb(self.sparta_train_bytes),
                "extra_adapter_gb": self.gb(self.extra_adapter_bytes)}

    def to_dict(self):
        d = asdict(self)
        d.update(self.view())
        return d


def memory_report(n, k, bits_per_value=16):
    if n <= 0:
        raise ConfigError("n must be positive")
    if not (0.0 < k <= 1.0):
        raise ConfigError(f"density must be in (0, 1], got {k}")
    b = bits_per_value
    m = k * n
    full = 4 * n * b / 8
    sparta = (m * (4 * b + 2 * INDEX_BITS) + n * b) / 8
    return MemoryReport(
        n=n, m=m, k=k, bits_per_value=b,
        storage_bytes=n * b / 8,
        fullft_train_bytes=full,
        sparta_train_bytes=sparta,
        extra_adapter_bytes=m * (2 * INDEX_BITS + b) / 8,
        savings_fraction=(full - sparta) / full,
        breakeven=sparta < full,
    )


def savings_fraction(k=None, *, sparsity=None):
    """Fraction of full-FT training memory saved at density ``k`` (16-bit values).

    Pass ``sparsity=s`` instead of ``k`` to get ``1 - s`` without float rounding.
    """
    if (k is None) == (sparsity is None):
        raise ConfigError("give exactly one of density k or sparsity")
    # exact rational arithmetic on the decimal value, e.g. k=0.2 -> 0.45 rather than 0.4499...
    q = Fraction(repr(float(k))) if sparsity is None else 1 - Fraction(repr(float(sparsity)))
    if not (0 < q <= 1):
        raise ConfigError(f"density must be in (0, 1], got {float(q)}")
    if q >= Fraction(1, 2):
        raise NoSavings(f"density {float(q)} >= 0.5 gives no memory savings over full fine-tuning")
    return float((3 - 6 * q) / 4)


def adapter_bytes(index_set, bits_per_value=16):
    """Exact stored size of an explicit index set: 1-D tensors need one index per entry."""
    total = 0
    for t in index_set:
        n_idx = 2 if len(t.shape) == 2 else 1
        total += t.m * (n_idx * INDEX_BITS + bits_per_value) // 8
    return total


SPARSITY_COLUMNS = (0.5, 0.8, 0.9, 0.95, 0.99)


def render_table(sizes=(2e9, 7e9), sparsities=SPARSITY_COLUMNS, bits_per_value=(16, 32)):
    """Plain-text table: storage, full FT and sparse-adaptation training memory in GB."""
    lines = []
    for b in bits_per_value:
        head = ["n", "bits", "storage", "Full FT"] + [f"{s:.0%}" for s in sparsities]
        lines.append(" | ".join(f"{h:>8}" for h in head))
        for n in sizes:
            reports = [memory_report(n, 1 - s, b) for s in sparsities]
            row = [_size_label(n), str(b), f"{MemoryReport.gb(reports[0].storage_bytes):g}",
                   f"{MemoryReport.gb(reports[0].fullft_train_bytes):g}"]
            row += [f"{MemoryReport.gb(r.sparta_train_bytes):g}" for r in reports]
            lines.append(" | ".join(f"{c:>8}" for c in row))
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def _size_label(n):
    if n >= 1e9 and float(n / 1e9).is_integer():
        return f"{int(n / 1e9)}B"
    return f"{n:g}"


def report_json(reports):
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
