"""Compare the compiled kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import sys
import timeit

import numpy as np

from sparta import _kernels_py, kernels

try:
    from sparta import _kernels as _kernels_cy
except ImportError:  # extension not built
    _kernels_cy = None


def cases(rng):
    n = 1_000_000
    flat = rng.normal(size=n).astype(np.float32)
    for k in (0.001, 0.01, 0.1):
        idx = np.flatnonzero(rng.random(n) < k).astype(np.int64)
        vals = rng.normal(size=idx.size).astype(np.float32)
        yield f"scatter_add  k={k:<5} m={idx.size}", lambda impl, idx=idx, vals=vals: \
            kernels.scatter_add(flat, idx, vals, 1, impl=impl)
        yield f"gather       k={k:<5} m={idx.size}", lambda impl, idx=idx: \
            kernels.gather(flat, idx, impl=impl)
    for m in (10_000, 1_000_000):
        p, g = rng.normal(size=m).astype(np.float32), rng.normal(size=m).astype(np.float32)
        mo, v = np.zeros(m, np.float32), np.zeros(m, np.float32)
        yield f"adam_update  m={m}", lambda impl, p=p, g=g, mo=mo, v=v: kernels.adam_update(
            p, g, mo, v, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, step=1, impl=impl)
    for d in (32, 64, 128):
        a = rng.normal(size=(d, d))
        yield f"jacobi_svd   {d}x{d}", lambda impl, a=a: kernels.jacobi_singular_values(a, impl=impl)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    if _kernels_cy is None:
        print("compiled extension not available; only the numpy fallback is timed", file=sys.stderr)
    impls = [("numpy", _kernels_py)] + ([("cython", _kernels_cy)] if _kernels_cy else [])
    rng = np.random.default_rng(0)
    results = []
    print(f"{'kernel':<36}" + "".join(f"{name:>12}" for name, _ in impls) + f"{'speedup':>10}")
    for label, fn in cases(rng):
        times = {}
        for name, impl in impls:
            number = 3
            best = min(timeit.repeat(lambda: fn(impl), number=number, repeat=args.repeat)) / number
            times[name] = best
        speed = times["numpy"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:<36}" + "".join(f"{times[n] * 1e3:>10.3f}ms" for n, _ in impls) + f"{speed:>9.1f}x")
        results.append({"kernel": label, **{f"{n}_s": t for n, t in times.items()}, "speedup": speed})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
