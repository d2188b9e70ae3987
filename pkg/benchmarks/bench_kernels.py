"""Compare the compiled kernels with the numpy/pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel and shape: mean milliseconds per call for each
backend, the speedup, and whether the outputs agree.
"""
import argparse
import timeit

import numpy as np

from sblm import _kernels_py

try:
    from sblm import _kernels
except ImportError:  # extension not built
    _kernels = None


def _cases(rng):
    for B, H in ((10, 256), (40, 256), (16, 768)):
        for dtype in (np.float32, np.float64):
            pre = (2 * rng.standard_normal((B, 4 * H))).astype(dtype)
            c = rng.standard_normal((B, H)).astype(dtype)
            yield f"gates_forward B={B} H={H} {np.dtype(dtype).name}", "lstm_gates_forward", (pre, c)
            g, _, tc, _ = _kernels_py.lstm_gates_forward(pre, c)
            dh = rng.standard_normal((B, H)).astype(dtype)
            dc = rng.standard_normal((B, H)).astype(dtype)
            yield f"gates_backward B={B} H={H} {np.dtype(dtype).name}", "lstm_gates_backward", (g, c, tc, dh, dc)
    for n, m in ((40, 40), (200, 200)):
        yield f"dtw {n}x{m}", "dtw", (rng.random((n, m)),)


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s}  equal")
    for name, fn, inputs in _cases(rng):
        fc, fp = getattr(_kernels, fn), getattr(_kernels_py, fn)
        n = max(1, args.repeat // (20 if fn == "dtw" else 1))
        tc = timeit.timeit(lambda: fc(*inputs), number=n) / n * 1e3
        tp = timeit.timeit(lambda: fp(*inputs), number=n) / n * 1e3
        print(f"{name:40s} {tc:10.4f} {tp:10.4f} {tp / tc:8.1f}x  {_same(fc(*inputs), fp(*inputs))}")


if __name__ == "__main__":
    main()
