"""Time every marker kernel under the compiled and the numpy backend.

    python3 benchmarks/bench_kernels.py [--markers N] [--grid N] [--repeat K]

Prints one row per kernel with the best-of-K time of each backend and the
speedup of the compiled one.
"""

import argparse
import time

import numpy as np

from vpconvex import geometry, kernels, poisson


def _points(n, rng, radius=0.98):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    return np.ascontiguousarray(d * radius * rng.uniform(0, 1, (n, 1)) ** (1 / 3))


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(grid, n, rng):
    x = _points(n, rng)
    v = rng.normal(size=x.shape)
    q = rng.uniform(0.1, 1.0, n)
    E = np.ascontiguousarray(rng.normal(size=grid.shape + (3,)))
    phi = np.ascontiguousarray(rng.normal(size=grid.shape))
    axes = np.array([1.0, 1.0, 1.0])
    o, h, shape = grid.origin, grid.h, grid.shape

    def run(mod, name):
        out = np.empty_like(x)
        if name == "interpolate":
            return lambda: mod.interpolate(x, E, o, h, out)
        if name == "kick":
            vv = v.copy()
            return lambda: mod.kick(x, vv, E, o, h, 1e-3)
        if name == "spline_gradient":
            return lambda: mod.spline_gradient(x, phi, o, h, out)
        if name == "spline_kick":
            vv = v.copy()
            return lambda: mod.spline_kick(x, vv, phi, o, h, 1e-3)
        if name in ("deposit", "spline_deposit"):
            acc = np.zeros(grid.size)
            fn = getattr(mod, name)
            return lambda: fn(x, q, grid.target, o, h, *shape, acc)
        if name == "drift":
            def step():
                xx, vv = x.copy(), v.copy()
                b = np.zeros(n, dtype=np.int64)
                last = np.full(n, -np.inf)
                pre = np.zeros_like(x)
                mod.drift(xx, vv, 0.05, axes, b, 0.0, last, pre, 64)
            return step
        raise KeyError(name)

    return run


NAMES = ["interpolate", "kick", "spline_gradient", "spline_kick", "deposit",
         "spline_deposit", "drift"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--markers", type=int, default=200_000)
    ap.add_argument("--grid", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    grid = poisson.Grid(geometry.ConvexDomain.unit_ball(), args.grid)
    run = cases(grid, args.markers, np.random.default_rng(0))
    mods = kernels.backends()
    if "compiled" not in mods:
        print("compiled extension not built; timing the numpy backend only")
    print(f"{args.markers} markers, grid {args.grid}^3, best of {args.repeat}")
    print(f"{'kernel':<16}" + "".join(f"{m:>12}" for m in mods) + f"{'speedup':>10}")
    for name in NAMES:
        t = {m: _best(run(mod, name), args.repeat) for m, mod in mods.items()}
        row = f"{name:<16}" + "".join(f"{t[m]:>11.4f}s" for m in mods)
        if "compiled" in t:
            row += f"{t['python'] / t['compiled']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
