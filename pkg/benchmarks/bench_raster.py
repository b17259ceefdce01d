"""Compiled vs pure-torch compositing: forward and forward+backward wall time.

    python3 benchmarks/bench_raster.py [--sizes 64 128] [--repeats 5]
"""
import argparse
import time

import torch

from splatattack import raster
from splatattack.render import render
from splatattack.scenes import toy_scene, toy_views


def timed(fn, repeats):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench(size, backend, repeats):
    g = toy_scene(0)
    view = toy_views(1, size)[0]

    def forward():
        with torch.no_grad():
            render(g, view, backend=backend)

    def backward():
        gg = g.clone().requires_grad_()
        out = render(gg, view, backend=backend)
        (out.rgb.sum() + out.geo_depth.sum()).backward()

    return timed(forward, repeats), timed(backward, repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[64, 128])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    backends = raster.available_backends
    print(f"default backend: {raster.BACKEND}; available: {', '.join(backends)}")
    print(f"{'size':>5} {'backend':>8} {'forward ms':>11} {'fwd+bwd ms':>11}")
    results = {}
    for size in args.sizes:
        for backend in backends:
            f, b = bench(size, backend, args.repeats)
            results[size, backend] = (f, b)
            print(f"{size:>5} {backend:>8} {1e3 * f:>11.2f} {1e3 * b:>11.2f}")
        if len(backends) == 2:
            (fc, bc), (fp, bp) = results[size, "cython"], results[size, "python"]
            print(f"{size:>5} {'speedup':>8} {fp / fc:>10.1f}x {bp / bc:>10.1f}x")


if __name__ == "__main__":
    main()
