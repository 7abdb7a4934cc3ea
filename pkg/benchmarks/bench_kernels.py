"""Benchmark the numba kernels against the pure-numpy fallback.

Run: python benchmarks/bench_kernels.py
The numba path is what MATCHA_BACKEND=auto selects when numba imports;
MATCHA_BACKEND=numpy forces the fallback this script compares against.
"""

import time

import numpy as np

from matcha.kernels import _numpy_impl

try:
    from matcha.kernels import _numba_impl
except ImportError:
    _numba_impl = None


def bench(label, fn, *args, repeats=20):
    fn(*args)  # warmup (and JIT compile for the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = fn(*args)
    dt = (time.perf_counter() - t0) / repeats
    print(f"  {label:>6}: {dt * 1e3:9.3f} ms")
    return out, dt


def compare(name, args, repeats=20):
    print(name)
    ref, t_np = bench("numpy", getattr(_numpy_impl, name), *args, repeats=repeats)
    if _numba_impl is None:
        print("  numba unavailable; skipping")
        return
    out, t_nb = bench("numba", getattr(_numba_impl, name), *args, repeats=repeats)
    assert np.allclose(ref, out, atol=1e-12), f"{name}: backend mismatch"
    print(f"  speedup: {t_np / t_nb:.2f}x")


def main():
    rng = np.random.default_rng(0)

    data = rng.normal(size=(128, 128, 256))
    xs = rng.uniform(0, 127, size=20000)
    ys = rng.uniform(0, 127, size=20000)
    compare("bilinear_gather", (data, xs, ys))

    grad = rng.normal(size=(20000, 256))
    compare("bilinear_scatter", (grad, xs, ys, 128, 128))

    compare("bilinear_resize", (data, 96, 96))

    e = rng.normal(size=(3, 3))
    e /= np.linalg.norm(e)
    pts_a = rng.normal(size=(100000, 2)) * 0.3
    pts_b = rng.normal(size=(100000, 2)) * 0.3
    compare("sampson_distances", (e, pts_a, pts_b), repeats=50)


if __name__ == "__main__":
    main()
