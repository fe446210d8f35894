"""Numba kernels against the pure-numpy fallback.

Times the fused selective scan (forward and backward) at a few sizes and a
whole-model forward pass, under both backends, on identical inputs.

    python benchmarks/bench_backends.py
    python benchmarks/bench_backends.py --model S --seconds 1 --threads 4
"""

import argparse
import statistics
import time

import numpy as np

from sepmamba import bench, kernels
from sepmamba import separator as sep

SIZES = [(64, 16, 2000), (128, 16, 4000), (256, 16, 8000)]  # (E, N, L)


def scan_case(E, N, L, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((E, L)).astype(np.float32)
    delta = rng.uniform(1e-3, 0.1, (E, L)).astype(np.float32)
    A = -rng.uniform(0.5, 16.0, (E, N)).astype(np.float32)
    B = rng.standard_normal((N, L)).astype(np.float32)
    C = rng.standard_normal((N, L)).astype(np.float32)
    D = np.ones(E, np.float32)
    h0 = np.zeros((E, N), np.float32)
    return u, delta, A, B, C, D, h0


def best_of(fn, repeats):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return min(times), statistics.fmean(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--model", default="toy", help="toy, S or M")
    ap.add_argument("--seconds", type=float, default=1.0)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    kernels.set_threads(args.threads)
    print(bench.environment())
    print()
    print(f"{'kernel':<10}{'E x N x L':>18}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for E, N, L in SIZES:
        args_ = scan_case(E, N, L)
        g = np.random.default_rng(1).standard_normal((E, L)).astype(np.float32)
        for name, fn in (
            ("scan fwd", lambda: kernels.fused_selective_scan(*args_)),
            ("scan bwd", lambda: kernels.selective_scan_backward(*args_, g)),
        ):
            res = {}
            for backend in ("numba", "numpy"):
                with kernels.use_backend(backend):
                    res[backend] = best_of(fn, args.repeats)[0]
            print(f"{name:<10}{f'{E} x {N} x {L}':>18}{res['numba']:>12.2f}{res['numpy']:>12.2f}{res['numpy'] / res['numba']:>9.1f}x")

    cfg = sep.SeparatorConfig(n_stages=3, base_dim=16, blocks_per_stage=2) if args.model == "toy" else sep.PRESETS[args.model]
    timings = bench.compare_backends(cfg, seconds=args.seconds, repeats=max(3, args.repeats))
    nb, npy = timings["numba"], timings["numpy"]
    print()
    print(f"model {args.model}, {args.seconds:g} s forward: numba {nb.mean:.1f} ms (min {nb.min:.1f}), numpy {npy.mean:.1f} ms (min {npy.min:.1f}), speedup {npy.mean / nb.mean:.1f}x")


if __name__ == "__main__":
    main()
