"""Compiled vs pure-NumPy token scan: timings and agreement.

    python3 benchmarks/bench_kernels.py [--repeats 7] [--tokens 64,256,1024]

Prints one CSV row per (backend, tokens, dtype) with the best-of-N time for
a forward plus backward pass, the speed-up over the NumPy fallback, and the
largest difference between the two backends' outputs.
"""

import argparse
import sys
import time

import numpy as np

from gdkvm import _scan_py, kernels
from gdkvm.tensor_core import make_rng


def _inputs(rng, n, p, ck, cv, dtype):
    S0 = rng.standard_normal((n, cv, ck)).astype(dtype)
    K = rng.standard_normal((n, p, ck)).astype(dtype)
    K /= np.linalg.norm(K, axis=-1, keepdims=True)
    V = rng.standard_normal((n, p, cv)).astype(dtype)
    erase = rng.uniform(0, 1, n).astype(dtype)
    write = rng.uniform(0, 1, n).astype(dtype)
    G = rng.standard_normal((n, cv, ck)).astype(dtype)
    return S0, K, V, erase, write, G


def _run(impl, args):
    S0, K, V, erase, write, G = args
    S, hist = impl.scan_forward(S0, K, V, erase, write)
    grads = impl.scan_backward(hist, K, V, erase, write, G)
    return (S,) + tuple(grads)


def _best(impl, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        _run(impl, args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--tokens", default="64,256,1024")
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--ck", type=int, default=16)
    ap.add_argument("--cv", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args(argv)
    backends = kernels.backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the NumPy fallback is available", file=sys.stderr)
    print("backend,tokens,dtype,seconds,speedup,max_abs_diff")
    for p in (int(t) for t in a.tokens.split(",")):
        for dtype in (np.float32, np.float64):
            args = _inputs(make_rng(a.seed, "bench", p), a.batch, p, a.ck, a.cv, dtype)
            ref = _run(_scan_py, args)
            base = _best(_scan_py, args, a.repeats)
            for name, impl in backends.items():
                secs = base if impl is _scan_py else _best(impl, args, a.repeats)
                diff = max(float(np.max(np.abs(x - y))) for x, y in zip(_run(impl, args), ref))
                print(f"{name},{p},{np.dtype(dtype).name},{secs:.6f},{base / secs:.2f},{diff:.3e}")


if __name__ == "__main__":
    main()
