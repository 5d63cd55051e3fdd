"""Kernel dispatch: the compiled extension when importable, NumPy otherwise.

Set ``SPARTA_PURE_PYTHON=1`` to force the NumPy path. Callers pass contiguous
float32 arrays and int64 flat indices; the thin wrappers here enforce that.
"""

import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
if os.environ.get("SPARTA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:  # pragma: no cover - depends on build
        _impl = _kernels_py

BACKEND = _impl.BACKEND


def _f32(x):
    return np.float32(x)


def _check_flat(flat):
    if flat.dtype != np.float32 or not flat.flags.c_contiguous or flat.ndim != 1:
        raise TypeError("kernel target must be a contiguous 1-D float32 array")


def scatter_add(flat, idx, vals, sign=1, impl=None):
    """In place ``flat[idx] += sign * vals``. ``idx`` must be unique."""
    _check_flat(flat)
    impl = impl or _impl
    impl.scatter_add(flat, np.ascontiguousarray(idx, dtype=np.int64),
                     np.ascontiguousarray(vals, dtype=np.float32), 1 if sign > 0 else -1)


def scatter_set(flat, idx, vals, impl=None):
    _check_flat(flat)
    impl = impl or _impl
    impl.scatter_set(flat, np.ascontiguousarray(idx, dtype=np.int64),
                     np.ascontiguousarray(vals, dtype=np.float32))


def gather(flat, idx, impl=None):
    impl = impl or _impl
    return impl.gather(np.ascontiguousarray(flat, dtype=np.float32),
                       np.ascontiguousarray(idx, dtype=np.int64))


def adam_update(p, g, m, v, *, lr, beta1, beta2, eps, weight_decay, step, impl=None):
    """One bias-corrected Adam step with decoupled weight decay, in place on ``p, m, v``."""
    for arr in (p, m, v):
        _check_flat(arr)
    impl = impl or _impl
    g = np.ascontiguousarray(g, dtype=np.float32)
    impl.adam_update(
        p, g, m, v,
        _f32(lr), _f32(beta1), _f32(beta2), _f32(1.0 - beta1), _f32(1.0 - beta2),
        _f32(1.0 - beta1 ** step), _f32(1.0 - beta2 ** step), _f32(eps),
        _f32(1.0 - lr * weight_decay),
    )


def jacobi_singular_values(a, tol=1e-15, max_sweeps=80, impl=None):
    impl = impl or _impl
    return impl.jacobi_singular_values(np.asarray(a, dtype=np.float64), tol, max_sweeps)
