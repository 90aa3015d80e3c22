#!/usr/bin/env python3
"""Benchmark the compiled matrix-product kernel against the numpy fallback.

The two backends are bit-identical by construction (same per-element
summation order, no FMA); this script reports their speed side by side plus
the end-to-end protected forward time under each backend. Run it twice with
OBFT_BACKEND=python to see the fallback as the active backend, or rely on the
direct kernel timings below which exercise both in one process.
"""

import argparse
import time

import numpy as np

from obft import backend


def time_kernel(fn, a, b, out, repeats):
    times = []
    for _ in range(repeats):
        out[:] = 0
        t0 = time.perf_counter()
        fn(a, b, out)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def kernel_table(repeats):
    print(f"active backend: {backend.backend_name()}")
    print(f"{'shape':>18} {'dtype':>8} {'compiled':>12} {'python':>12} {'speedup':>8}  bitwise")
    rng = np.random.default_rng(0)
    for n in (32, 64, 128, 256):
        for dtype in (np.float32, np.float64):
            a = rng.standard_normal((n, n)).astype(dtype)
            b = rng.standard_normal((n, n)).astype(dtype)
            out_c = np.zeros((n, n), dtype)
            out_p = np.zeros((n, n), dtype)
            t_c = time_kernel(backend.matmul_into_compiled, a, b, out_c, repeats) \
                if backend.compiled_available() else float("nan")
            t_p = time_kernel(backend.matmul_into_python, a, b, out_p, repeats)
            same = out_c.tobytes() == out_p.tobytes() if backend.compiled_available() else "n/a"
            print(f"{f'{n}x{n}x{n}':>18} {np.dtype(dtype).name:>8} "
                  f"{t_c * 1e3:>10.3f}ms {t_p * 1e3:>10.3f}ms {t_p / t_c:>8.2f}  {same}")


def forward_benchmark(repeats):
    from obft.config import ExperimentConfig
    from obft.harness import batch_from_corpus, build_model, default_corpus, _partition_for
    from obft.zones import AuthToken, serve_zones, wrap_batch

    cfg = ExperimentConfig(preset="toy", seq_len=64)
    params, adapters = build_model(cfg, 0)
    pm = _partition_for(cfg, params, adapters, 0)
    batch = batch_from_corpus(default_corpus(), 64, 0, 0)
    executor = serve_zones(pm, "in_process", auth_secret=b"bench")
    token = AuthToken("bench", b"bench")
    env = wrap_batch(batch)
    try:
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            executor.forward(env, token)
            times.append(time.perf_counter() - t0)
    finally:
        executor.close()
    print(f"\nprotected forward, toy preset, seq 64, backend={backend.backend_name()}: "
          f"{np.median(times) * 1e3:.1f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=11)
    args = parser.parse_args()
    kernel_table(args.repeats)
    forward_benchmark(args.repeats)


if __name__ == "__main__":
    main()
