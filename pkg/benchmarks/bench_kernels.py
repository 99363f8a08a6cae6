"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--sizes 200 500 1000] [--repeat 3]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from histoexpr.kernels import BACKENDS


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_ward(n, repeat):
    rng = np.random.default_rng(n)
    x = rng.normal(size=(n, 8))
    d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
    condensed = np.ascontiguousarray(d[np.triu_indices(n, 1)])
    out = {}
    for name, mod in sorted(BACKENDS.items()):
        out[name] = _best(lambda: mod.ward_linkage(condensed, n), repeat)
    return out


def bench_es(n_genes, set_size, n_perm, repeat):
    rng = np.random.default_rng(0)
    keys = rng.random((n_perm, n_genes))
    pos = np.sort(np.argpartition(keys, set_size - 1, axis=1)[:, :set_size], axis=1).astype(np.int64)
    pos = np.ascontiguousarray(pos)
    out = {}
    for name, mod in sorted(BACKENDS.items()):
        out[name] = _best(lambda: mod.es_from_positions(pos, n_genes), repeat)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[200, 500, 1000])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    print(f"backends: {', '.join(sorted(BACKENDS))}")
    print("kernel\tsize\t" + "\t".join(f"{b}_s" for b in sorted(BACKENDS)) + "\tspeedup")
    for n in args.sizes:
        r = bench_ward(n, args.repeat)
        sp = r["python"] / r["cython"] if "cython" in r else float("nan")
        print(f"ward\t{n}\t" + "\t".join(f"{r[b]:.4f}" for b in sorted(r)) + f"\t{sp:.1f}x")
    for s in (15, 50, 200):
        r = bench_es(15000, s, 2000, args.repeat)
        sp = r["python"] / r["cython"] if "cython" in r else float("nan")
        print(f"es(N=15000,perm=2000)\t{s}\t" + "\t".join(f"{r[b]:.4f}" for b in sorted(r)) + f"\t{sp:.1f}x")


if __name__ == "__main__":
    main()
