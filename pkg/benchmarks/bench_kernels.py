"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--epochs 20000] [--repeat 3] [--threads 1 4]

Prints one row per (kernel, backend, threads) with the best wall time over
the repeats and the speedup relative to the fallback.
"""
import argparse
import time

import numpy as np

from cmfdsim import kernels
from cmfdsim.funcspace import two_block_measures
from cmfdsim.graph import PRESETS
from cmfdsim.meta import LossFunctional, run_meta, step_sizes


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_tql(backend, size, repeat):
    rng = np.random.default_rng(0)
    diag, off = rng.standard_normal(size), rng.standard_normal(size - 1)
    return best_of(lambda: backend.tql_eigenvalues(diag, off), repeat)


def bench_meta(backend, preset, epochs, threads, repeat, kl=False):
    topo = PRESETS[preset].build()
    S = 64
    x = (np.arange(S) + 0.5) / S
    measures = two_block_measures(topo.n, S, 0.8)
    if kl:
        p = 0.5 + 0.4 * np.sin(2 * np.pi * x)
        loss = LossFunctional("kl", np.stack([p, 1 - p], axis=1))
        f0 = np.full((topo.n, S, 2), 0.5)
    else:
        loss = LossFunctional("mse", np.sin(2 * np.pi * x)[:, None])
        f0 = np.zeros((topo.n, S, 1))
    etas = step_sizes("inv_t", 0.1, epochs)
    eps = 1.0 / (2 * topo.max_degree)
    return best_of(lambda: run_meta(topo, measures, loss, f0, etas, eps, threads=threads, backend=backend),
                   repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, nargs="+", default=[1, 4])
    ap.add_argument("--tql-size", type=int, default=200)
    args = ap.parse_args()

    if kernels.compiled is None:
        print("compiled extension not built; only the fallback is timed")
    rows = []
    for name, fn in [
        (f"tql n={args.tql_size}", lambda b, t: bench_tql(b, args.tql_size, args.repeat)),
        (f"meta R3 mse T={args.epochs}", lambda b, t: bench_meta(b, "R3", args.epochs, t, args.repeat)),
        (f"meta R3 kl T={args.epochs}", lambda b, t: bench_meta(b, "R3", args.epochs, t, args.repeat, kl=True)),
    ]:
        base = fn(kernels.fallback, 1)
        rows.append((name, "python", 1, base, 1.0))
        if kernels.compiled is not None:
            for t in (args.threads if name.startswith("meta") else [1]):
                sec = fn(kernels.compiled, t)
                rows.append((name, "compiled", t, sec, base / sec))

    print(f"{'kernel':<24} {'backend':<9} {'threads':>7} {'seconds':>10} {'speedup':>8}")
    for name, backend, t, sec, speed in rows:
        print(f"{name:<24} {backend:<9} {t:>7} {sec:>10.4f} {speed:>7.1f}x")


if __name__ == "__main__":
    main()
