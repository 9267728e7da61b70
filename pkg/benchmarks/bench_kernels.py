"""Time the compiled and pure-Python kernel backends on the same inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--points 20000]

Prints one line per (kernel, backend) with the best wall time and the
speed-up of the compiled path, and checks the outputs agree.
"""

import argparse
import time

import numpy as np

from photodepth import kernels


def _best(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_bilinear(backends, repeat, size):
    rng = np.random.default_rng(0)
    h, w = size
    src = rng.uniform(size=(h, w, 3))
    x = rng.uniform(-2, w + 1, size=(h, w))
    y = rng.uniform(-2, h + 1, size=(h, w))
    results = {}
    for name, mod in backends.items():
        t, out = _best(lambda: mod.bilinear_sample(src, x, y), repeat)
        results[name] = (t, out)
    return results


def bench_radius(backends, repeat, n):
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 2, size=(n, 3))
    b = a + rng.normal(0, 0.05, size=(n, 3))
    results = {}
    for name, mod in backends.items():
        t, out = _best(lambda: mod.radius_hits(a, b, 0.1), repeat)
        results[name] = (t, out)
    return results


def report(label, results):
    base = results.get("python", (None,))[0]
    ref = None
    for name, (t, out) in results.items():
        speed = f"  x{base / t:.1f}" if base and name != "python" else ""
        print(f"{label:<10} {name:<7} {t * 1e3:9.2f} ms{speed}")
        arrs = out if isinstance(out, tuple) else (out,)
        if ref is None:
            ref = arrs
        else:
            same = all(np.array_equal(p, q) for p, q in zip(ref, arrs))
            print(f"{'':<10} outputs identical: {same}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--size", type=int, nargs=2, default=(384, 640))
    args = ap.parse_args(argv)
    backends = kernels.backends()
    print(f"default backend: {kernels.BACKEND}; available: {', '.join(backends)}")
    report("bilinear", bench_bilinear(backends, args.repeat, tuple(args.size)))
    report("radius", bench_radius(backends, args.repeat, args.points))


if __name__ == "__main__":
    main()
