"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints median wall time per kernel and backend and checks that both
backends return identical results on the benchmark inputs.
"""

import argparse
import statistics
import time

import numpy as np

from topoaff._kernels import _pykernels

try:
    from topoaff._kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def timed(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times), out


def ransac_case(rng, n=60, iters=1000):
    src = rng.uniform(0, 640, (n, 2))
    H = np.array([[1.02, 0.05, 12.0], [-0.04, 0.98, -7.0], [1e-4, -5e-5, 1.0]])
    ph = np.c_[src, np.ones(n)] @ H.T
    dst = ph[:, :2] / ph[:, 2:]
    dst[: n // 3] = rng.uniform(0, 640, (n // 3, 2))
    samples = np.argpartition(rng.random((iters, n)), 4, axis=1)[:, :4].astype(np.int64)
    return (src, dst, samples, 3.0)


def agglomerate_case(rng, n):
    X = rng.standard_normal((n, 8))
    S = -np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1))
    iu = np.triu_indices(n, 1)
    return (S, "average", 0.4 * S[iu].mean())


def ap_case(rng, n=2000, c=100):
    return (rng.random((n, c)), (rng.random((n, c)) < 0.1).astype(np.int64))


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if a is None or b is None:
        return a is b
    if isinstance(a, list):
        return len(a) == len(b) and all(same(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), equal_nan=True, atol=1e-9)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cases = [
        ("ransac_hypotheses 60 pts x 1000", "ransac_hypotheses", ransac_case(rng)),
        ("agglomerate n=200", "agglomerate", agglomerate_case(rng, 200)),
        ("agglomerate n=600", "agglomerate", agglomerate_case(rng, 600)),
        ("average_precision_columns 2000x100", "average_precision_columns", ap_case(rng)),
    ]
    print(f"{'kernel':40s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  equal")
    for label, name, inputs in cases:
        tp, outp = timed(lambda: getattr(_pykernels, name)(*inputs), args.repeat)
        if _ckernels is None:
            print(f"{label:40s} {1e3 * tp:10.2f} {'n/a':>10s}")
            continue
        tc, outc = timed(lambda: getattr(_ckernels, name)(*inputs), args.repeat)
        print(f"{label:40s} {1e3 * tp:10.2f} {1e3 * tc:10.2f} {tp / tc:7.1f}x  {same(outp, outc)}")
    if _ckernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation`")


if __name__ == "__main__":
    main()
