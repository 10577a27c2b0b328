"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--size 256]

Both implementations are imported side by side, so the env flag does not
matter here. The first jit call (compilation or cache load) is excluded.
"""

import argparse
import timeit

import numpy as np

from propulsion_lab import kernels


def cases(size, rng):
    v = rng.standard_normal((size, size))
    z = 1.0 + 0.1 * rng.standard_normal(size)
    g = rng.standard_normal((size, size))
    stack = rng.standard_normal((4, size * size))
    theta = rng.standard_normal((64, 128, 128)) / np.sqrt(128)
    xi = rng.standard_normal((64, 128))
    xj = rng.standard_normal((64, 128))
    ranks = rng.integers(0, size // 4, size * 16).astype(np.float64)
    return {
        "propulsion_forward k=15": lambda impl: impl.propulsion_forward(v, z, 15),
        "propulsion_backward k=15": lambda impl: impl.propulsion_backward(g, v, z, 15),
        "pool_forward max p=4": lambda impl: impl.pool_forward(stack, 1),
        "pool_forward l2 p=4": lambda impl: impl.pool_forward(stack, 3),
        "average_ranks (ties)": lambda impl: impl.average_ranks(ranks),
        "jl_deviations 64x128": lambda impl: impl.jl_deviations(theta, xi, xj),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--size", type=int, default=256)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases(args.size, rng).items():
        fn(kernels.jit_impl)  # warm-up
        fn(kernels.numpy_impl)
        t_np = min(timeit.repeat(lambda: fn(kernels.numpy_impl), number=1, repeat=args.repeat))
        t_jit = min(timeit.repeat(lambda: fn(kernels.jit_impl), number=1, repeat=args.repeat))
        print(f"{name:28s} {1e3 * t_np:10.3f} {1e3 * t_jit:10.3f} {t_np / t_jit:8.2f}")


if __name__ == "__main__":
    main()
