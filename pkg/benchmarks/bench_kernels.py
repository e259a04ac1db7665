"""Time the numba kernels against the pure-numpy reference.

    python benchmarks/bench_kernels.py [--weights 2000] [--steps 200] [--repeat 5]

Each kernel is called once per backend before timing so JIT compilation is
excluded. Results are checked for agreement before anything is reported.
"""
import argparse
import time

import numpy as np

from aashnet.kernels import OK, implementations

FRAC, DECAY = 40, 16
NUM = int(0.9 * 2**DECAY)


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def momentum_roundtrip(k, n, steps, seed=0):
    """``steps`` forward updates then the full reversal; returns final (w, v)."""
    rng = np.random.default_rng(seed)
    w = np.round(rng.normal(size=n) * 2**FRAC).astype(np.int64)
    v = np.zeros(n, dtype=np.int64)
    grads = rng.normal(size=(steps, n))
    stack = np.empty((steps, n), dtype=np.uint16)
    rem = np.empty(n, dtype=np.int64)
    for t in range(steps):
        assert k.fxp_forward(w, v, grads[t], 0.1, NUM, DECAY, FRAC, rem) == OK
        stack[t] = rem
    for t in range(steps - 1, -1, -1):
        assert k.fxp_reverse_position(w, v, 0.1, FRAC) == OK
        assert k.fxp_reverse_velocity(v, grads[t], NUM, DECAY, FRAC, stack[t].astype(np.int64)) == OK
    return w, v


def lasso(k, n, m, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, m))
    X -= X.mean(axis=0)
    y = X[:, : m // 4] @ rng.normal(size=m // 4) + rng.normal(size=n)
    y -= y.mean()
    beta = np.zeros(m)
    it, _ = k.lasso_cd(X, y, 0.05, beta, 100_000, 1e-8)
    return beta, it


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--weights", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--rows", type=int, default=500)
    ap.add_argument("--cols", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    impls = implementations()
    cases = {
        "momentum round trip": lambda k: momentum_roundtrip(k, args.weights, args.steps),
        "lasso coordinate descent": lambda k: lasso(k, args.rows, args.cols),
    }
    print(f"backends: {', '.join(impls)}")
    for name, case in cases.items():
        outs = {b: case(k) for b, k in impls.items()}  # warm-up and correctness
        ref = outs["numpy"]
        for b, out in outs.items():
            for a, r in zip(out, ref):
                if not np.allclose(a, r, rtol=1e-10, atol=0):
                    raise SystemExit(f"{name}: {b} disagrees with numpy")
        timings = {b: _best(lambda k=k: case(k), args.repeat) for b, k in impls.items()}
        base = timings["numpy"]
        cols = "  ".join(f"{b} {t * 1e3:9.2f} ms ({base / t:5.1f}x)" for b, t in timings.items())
        print(f"{name:<26} {cols}")


if __name__ == "__main__":
    main()
