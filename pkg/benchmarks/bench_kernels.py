"""Time the numba and pure-numpy kernel backends on identical inputs.

    python benchmarks/bench_kernels.py [--size 24] [--repeat 3]

Both backends are called directly, so one process measures both regardless
of SCALENETS_DISABLE_NUMBA.  The first numba call per signature compiles and
is excluded by a warm-up call.
"""
import argparse
import time

import numpy as np

from scalenets import kernels


def _time(fn, repeat):
    fn()  # warm-up (numba compilation, scratch allocation)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(size, rng):
    s = size
    x = rng.normal(size=(1, 4, 8, s, s, s))
    w = rng.normal(size=(4, 8, 8, 3, 3, 3))
    b = rng.normal(size=(4, 8))
    g = rng.normal(size=(1, 4, 8, s, s, s))
    xf = rng.normal(size=(1, 1, 16, s, s, s))
    wf = rng.normal(size=(1, 16, 16, 3, 3, 3))
    gf = rng.normal(size=(1, 1, 16, s, s, s))
    vol = rng.normal(size=(s, s, s))
    coords = rng.uniform(-1, s, size=(3, s ** 3))
    labels = rng.integers(0, 6, size=(s, s, s)).astype(np.uint8)
    ranks2 = 2 * np.arange(1, 13, dtype=np.int64)
    return {
        "conv fwd cross_f 4x8->8 k3": lambda be: be.conv_forward(x, w, b, 1),
        "conv bwd cross_f 4x8->8 k3": lambda be: be.conv_backward(x, w, g, 1),
        "conv fwd joint 16->16 k3 d2": lambda be: be.conv_forward(xf, wf, b[:1, :1].repeat(16, 1), 2),
        "conv bwd joint 16->16 k3 d2": lambda be: be.conv_backward(xf, wf, gf, 2),
        "trilinear resample": lambda be: be.trilinear(vol, coords),
        "nearest resample": lambda be: be.nearest(labels, coords),
        "signed-rank sums n=12": lambda be: be.signed_rank_sums(ranks2),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=24)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"volume {args.size}^3, best of {args.repeat}")
    print(f"{'kernel':32s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}")
    for name, fn in cases(args.size, rng).items():
        a = np.asarray(fn(kernels.NUMPY)[0] if name.startswith("conv bwd") else fn(kernels.NUMPY))
        c = np.asarray(fn(kernels.NUMBA)[0] if name.startswith("conv bwd") else fn(kernels.NUMBA))
        assert np.allclose(a, c, rtol=1e-9, atol=1e-9), name
        t_np = _time(lambda: fn(kernels.NUMPY), args.repeat)
        t_nb = _time(lambda: fn(kernels.NUMBA), args.repeat)
        print(f"{name:32s} {1e3 * t_np:11.2f} {1e3 * t_nb:11.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
