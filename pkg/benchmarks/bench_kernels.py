"""Time the compiled kernels against their pure-Python fallbacks.

Usage: ``python benchmarks/bench_kernels.py [--repeat N]``
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from medcoder import _fallback

try:
    from medcoder import _core
except ImportError:
    _core = None


def workloads(seed: int = 0):
    rng = np.random.default_rng(seed)
    words = ["acute", "chronic", "kidney", "renal", "heart", "failure", "injury", "disease", "type", "mellitus"]
    anchor = "acute on chronic kidney failure"
    candidates = [" ".join(rng.choice(words, size=int(rng.integers(2, 6)))) for _ in range(2000)]
    X = (rng.random((2000, 300)) < 0.2).astype(np.uint8)
    y = (rng.random(2000) < 0.3).astype(np.uint8)
    w = np.where(y == 1, 1.5, 0.7)
    rows = np.arange(2000, dtype=np.intp)
    return {
        "levenshtein_many (2000 strings)": lambda m: m.levenshtein_many(anchor, candidates),
        "split_counts (2000 x 300)": lambda m: m.split_counts(X, w, y, rows),
    }


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _core is None:
        print("medcoder._core is not compiled; run `pip install -e . --no-build-isolation` first")
    print(f"{'kernel':34s} {'python (ms)':>12s} {'cython (ms)':>12s} {'speedup':>8s}")
    for name, call in workloads().items():
        py = min(timeit.repeat(lambda: call(_fallback), number=1, repeat=args.repeat)) * 1e3
        if _core is None:
            print(f"{name:34s} {py:12.2f} {'-':>12s} {'-':>8s}")
            continue
        assert all(np.allclose(a, b) for a, b in zip(np.atleast_2d(call(_fallback)), np.atleast_2d(call(_core))))
        cy = min(timeit.repeat(lambda: call(_core), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:34s} {py:12.2f} {cy:12.2f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
