"""Compare the numba and numpy kernel paths on realistic input sizes.

Run with ``python benchmarks/bench_kernels.py``. Each kernel is timed on the
same inputs through both namespaces after one warm-up call (so numba
compilation is excluded), and the outputs are checked for equality.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from onfattn import kernels


def rolls(rng, T: int, density: float = 0.05):
    frames = (rng.random((T, 88)) < density * 4).astype(np.uint8)
    onsets = ((rng.random((T, 88)) < density) & frames.astype(bool)).astype(np.uint8)
    return onsets, frames


def match_graph(rng, n: int, degree: float = 3.0):
    adj = rng.random((n, n)) < degree / n
    rows, cols = np.nonzero(adj)
    indptr = np.zeros(n + 1, np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return indptr, cols.astype(np.int64), n


def cases(rng, T: int):
    onsets, frames = rolls(rng, T)
    return {
        "decode_notes": (onsets, frames, 1, True),
        "roll_runs": (frames,),
        "bipartite_match": match_graph(rng, 600),
        "signed_rank_counts": (rng.integers(1, 50, 25).astype(np.int64),),
    }


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--frames", type=int, default=20000, help="roll length (20000 frames is about 10 min of audio)")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}  equal")
    for name, inputs in cases(rng, args.frames).items():
        fast = getattr(kernels.NUMBA_KERNELS, name)
        slow = getattr(kernels.NUMPY_KERNELS, name)
        a, b = fast(*inputs), slow(*inputs)  # warm-up, and compile
        t_fast = min(timeit.repeat(lambda: fast(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(lambda: slow(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20} {t_fast:>10.2f} {t_slow:>10.2f} {t_slow / t_fast:>7.1f}x  {same(a, b)}")


if __name__ == "__main__":
    main()
