"""Time the numpy and numba kernel backends on embedder-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel with the median wall time of each backend and the
speedup. Both backends are importable regardless of PIXELREP_NUMBA.
"""

import argparse
import statistics
import time

import numpy as np

from pixelrep import kernels


def cases(rng):
    # a batch of ~540 windows through a 4-channel 3x1 conv, as in desk training
    x = rng.random((540, 1, 32, 32))
    w = rng.standard_normal((4, 1, 3, 1))
    b = rng.standard_normal(4)
    gy = rng.standard_normal((540, 4, 30, 32))
    a = rng.standard_normal((540, 4, 30, 32))
    sel = rng.random(540) < 0.9
    mu, var = kernels.IMPLEMENTATIONS["numpy"]["bn_stats"](a, sel)
    rstd = 1.0 / np.sqrt(var + 1e-5)
    gamma, beta = np.ones(4), np.zeros(4)
    img = rng.random((32, 4000)).astype(np.float32)
    glyph = rng.random((20, 12)).astype(np.float32)
    canvas = np.zeros((32, 4000), np.float32)
    idx = rng.integers(0, 2000, 8000)
    src = rng.standard_normal((8000, 64))
    dst = np.zeros((2000, 64))
    return {
        "conv2d_forward": ("conv2d_forward", (x, w, b, 1, 1)),
        "conv2d_backward": ("conv2d_backward", (x, w, gy, 1, 1, False)),
        "bn_stats": ("bn_stats", (a, sel)),
        "bn_normalize": ("bn_normalize", (a, mu, rstd, gamma, beta)),
        "bn_backward": ("bn_backward", (a, gy, mu, rstd, gamma, sel, True)),
        "extract_windows": ("extract_windows", (img, 32, 16, 249)),
        "composite_max": ("composite_max", (canvas, glyph, 6, 100)),
        "scatter_add_rows": ("scatter_add_rows", (dst, idx, src)),
    }


def timeit(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = [b for b in ("numpy", "numba") if b in kernels.IMPLEMENTATIONS]
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<18}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}")
    for name, (key, fargs) in cases(np.random.default_rng(0)).items():
        ms = [1e3 * timeit(kernels.IMPLEMENTATIONS[b][key], fargs, args.repeat) for b in backends]
        speed = f"{ms[0] / ms[1]:.1f}x" if len(ms) == 2 else "-"
        print(f"{name:<18}" + "".join(f"{m:>12.2f}" for m in ms) + f"{speed:>10}")


if __name__ == "__main__":
    main()
