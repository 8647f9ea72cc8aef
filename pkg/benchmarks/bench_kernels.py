"""Compare the numba and pure-numpy kernel backends.

Both implementations are importable regardless of CITYSEG_DISABLE_NUMBA, so
one process times them side by side.  The first numba call (JIT compile)
is excluded.  Usage::

    python benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from cityseg import _kernels as K


def _inputs(n: int, rng: np.random.Generator):
    q = rng.integers(0, 1 << 21, (n, 3), dtype=np.int64)
    pos = rng.uniform(-100, 100, (n, 3)).astype(np.float32)
    feat = rng.normal(size=(n, 4)).astype(np.float32)
    lab = rng.integers(0, 10, n).astype(np.uint16)
    keys = np.sort(rng.integers(0, n // 8 + 1, n)).astype(np.int64)
    return q, pos, feat, lab, keys


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    q, pos, feat, lab, keys = _inputs(args.n, np.random.default_rng(0))
    center = np.zeros(3)
    cases = {
        "morton_encode": (K.np_morton_encode, K.nb_morton_encode, (q,)),
        "hilbert_encode": (K.np_hilbert_encode, K.nb_hilbert_encode, (q,)),
        "sq_distances": (K.np_sq_distances, K.nb_sq_distances, (pos, center)),
        "voxel_reduce": (K.np_voxel_reduce, K.nb_voxel_reduce, (keys, pos, feat, lab)),
    }
    print(f"n={args.n}  best of {args.repeat}  (active backend: {K.BACKEND})")
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (f_np, f_nb, a) in cases.items():
        f_nb(*a)  # compile
        t_np = min(timeit.repeat(lambda: f_np(*a), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: f_nb(*a), number=1, repeat=args.repeat))
        print(f"{name:<16}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
