"""Time the batched RK4 kernel (forward and adjoint) on both backends.

    python3 benchmarks/bench_rk4.py [--repeats 5]

Workloads mirror where the kernel is called: the rollout loss (many short
trajectories), the IC rollout (a few full-length ones) and greedy sampling
(N_s posterior draws over the whole time grid).
"""

import argparse
import time

import numpy as np

from horom.kernels import BACKENDS, rk4_backward, rk4_forward

WORKLOADS = [
    # name, trajectories, max steps, latent width L, order K
    ("rollout", 400, 60, 5, 2),
    ("ic_rollout", 6, 100, 5, 2),
    ("greedy", 20, 500, 5, 2),
    ("wide_latent", 50, 200, 20, 2),
]


def make_case(B, S, L, K, seed=0):
    rng = np.random.default_rng(seed)
    KL = K * L
    G = rng.normal(scale=0.3, size=(B, L, KL))
    b = rng.normal(scale=0.1, size=(B, L))
    x0 = rng.normal(size=(B, KL))
    nsteps = rng.integers(1, S + 1, size=B).astype(np.int64)
    h = np.zeros((B, S))
    for i, n in enumerate(nsteps):
        h[i, :n] = 1.0 / S
    gX = rng.normal(size=(B, S + 1, KL))
    return G, b, x0, h, nsteps, gX


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)

    names = [n for n in ("numpy", "compiled") if n in BACKENDS]
    if "compiled" not in BACKENDS:
        print("compiled extension not built; timing the NumPy fallback only")
    print(f"{'workload':<12} {'backend':<9} {'forward ms':>11} {'backward ms':>12} {'speedup':>8}")
    for name, B, S, L, K in WORKLOADS:
        G, b, x0, h, nsteps, gX = make_case(B, S, L, K)
        base = None
        for backend in names:
            X, valid = rk4_forward(G, b, x0, h, nsteps, 1e6, backend=backend)
            fwd = best_of(lambda: rk4_forward(G, b, x0, h, nsteps, 1e6, backend=backend), args.repeats)
            bwd = best_of(lambda: rk4_backward(G, b, X, h, valid, gX, backend=backend), args.repeats)
            total = fwd + bwd
            base = base or total
            print(f"{name:<12} {backend:<9} {fwd * 1e3:11.3f} {bwd * 1e3:12.3f} {base / total:7.1f}x")


if __name__ == "__main__":
    main()
