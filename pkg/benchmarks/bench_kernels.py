"""Time the MLPG kernels: compiled extension vs pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--dims 18] [--frames 200 1000 5000] [--repeat 5]

Both backends solve the same batch and the script reports the best-of-N wall
time plus the max absolute difference between their solutions.
"""

import argparse
import timeit

import numpy as np

from a2a import _kernels_py
from a2a.mlpg import DeltaWindows

try:
    from a2a import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, default=18)
    ap.add_argument("--frames", type=int, nargs="+", default=[200, 1000, 5000])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    coef = DeltaWindows().as_array()
    backends = {"python": _kernels_py}
    if _kernels_c is not None:
        backends["cython"] = _kernels_c
    else:
        print("compiled extension not built; timing the fallback only")

    print(f"{'T':>6} {'backend':>8} {'best ms':>10} {'speedup':>8}")
    for T in args.frames:
        rng = np.random.default_rng(args.seed)
        mu = rng.normal(size=(args.dims, T, 3))
        prec = 1.0 / rng.uniform(0.1, 5.0, size=(args.dims, T, 3))
        times, sols = {}, {}
        for name, mod in backends.items():
            sols[name] = mod.mlpg_solve_batch(mu, prec, coef)[0]
            times[name] = min(timeit.repeat(lambda: mod.mlpg_solve_batch(mu, prec, coef),
                                            number=1, repeat=args.repeat))
        for name, t in times.items():
            print(f"{T:>6} {name:>8} {t * 1e3:>10.2f} {times['python'] / t:>7.1f}x")
        if len(sols) == 2:
            print(f"{'':>6} max |cython - python| = {np.max(np.abs(sols['cython'] - sols['python'])):.2e}")


if __name__ == "__main__":
    main()
