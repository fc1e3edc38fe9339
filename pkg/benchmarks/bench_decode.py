"""Benchmark the decoder's numba kernels against the pure-numpy fallback.

Usage:
    python3 benchmarks/bench_decode.py [--n-maps 40] [--size 128] [--d 3] [--repeat 3]

Both backends produce identical detections; this script only compares
wall-clock time. The numpy path is also what runs when numba is absent or
LITERATI_NUMBA=0 is set.
"""

import argparse
import time

import numpy as np

from literati import _decode_kernels as kernels
from literati.map_decoder import DecodeParams, decode
from literati.synthetic import make_planted_maps


def bench(backend, maps, params, repeat):
    decode(maps[0].logits, params, backend=backend)  # warm-up / JIT compile
    best = float("inf")
    detections = 0
    for _ in range(repeat):
        t0 = time.perf_counter()
        detections = sum(len(decode(m.logits, params, backend=backend)) for m in maps)
        best = min(best, time.perf_counter() - t0)
    return best, detections


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-maps", type=int, default=40)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--d", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    maps = make_planted_maps(args.n_maps, seed=0, shape=(args.size, args.size))
    params = DecodeParams(d=args.d)

    print(f"{args.n_maps} maps of {args.size}x{args.size}, d={args.d}, "
          f"best of {args.repeat} runs")
    times = {}
    for backend in kernels.available_backends():
        elapsed, detections = bench(backend, maps, params, args.repeat)
        times[backend] = elapsed
        rate = args.n_maps / elapsed
        print(f"  {backend:6s}  {elapsed * 1e3:8.1f} ms  {rate:8.1f} maps/s  "
              f"({detections} detections)")
    if len(times) == 2:
        print(f"  speedup: {times['numpy'] / times['numba']:.1f}x")


if __name__ == "__main__":
    main()
