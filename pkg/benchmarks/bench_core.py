"""Time the compiled degradation kernels against the numpy fallback.

    python3 benchmarks/bench_core.py [--repeat N] [--size S]
"""
import argparse
import timeit

import numpy as np

from lightbsr import kernels
from lightbsr.degradation import make_anisotropic_kernel, resample_weights


def cases(size: int):
    rng = np.random.default_rng(0)
    k = make_anisotropic_kernel(3.0, 0.8, 0.5).weights[::-1, ::-1].copy()
    padded = rng.random((3, size + 20, size + 20))
    rows = rng.random((3 * size, size))
    idx, w = resample_weights(size, size // 4)
    return {
        "valid_conv2d 21x21": lambda impl: impl.valid_conv2d(padded, k),
        "resample_last x1/4": lambda impl: impl.resample_last(rows, idx, w),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timing repetitions (best is reported)")
    ap.add_argument("--size", type=int, default=256, help="image side in pixels")
    args = ap.parse_args(argv)
    impls = kernels.backends()
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<22}" + "".join(f"{name:>12}" for name in impls) + f"{'speedup':>10}")
    for name, fn in cases(args.size).items():
        outs = {b: fn(impl) for b, impl in impls.items()}
        ref = outs["python"]
        assert all(np.array_equal(o, ref) for o in outs.values()), f"{name}: backends disagree"
        best = {b: min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) for b, impl in impls.items()}
        speed = f"{best['python'] / best['cython']:.1f}x" if "cython" in best else "-"
        print(f"{name:<22}" + "".join(f"{best[b] * 1e3:>10.2f}ms" for b in impls) + f"{speed:>10}")


if __name__ == "__main__":
    main()
