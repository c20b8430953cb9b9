"""Compiled core vs numpy fallback on the hot kernels.

    python3 benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]

Both routes run in the same process; every row also checks that the two
outputs are bit-identical.
"""

import argparse
import math
import sys
import timeit

import numpy as np

from neumat import gemmsim, kernels, pwl


def grid_args(M, K, N, acc):
    return (M, K, N, np.asarray(gemmsim.TILES, dtype=np.int64),
            np.array([[o.index(c) for c in "mkn"] for o in gemmsim.ORDERS], dtype=np.int64),
            np.array([gemmsim.STATIONARY.index(s) for s in acc.stationaries()], dtype=np.int64),
            acc.pe_count, acc.clusters, acc.l1_bytes, acc.l2_bytes, acc.word_bytes,
            acc.noc_bytes_per_cycle, acc.dram_bytes_per_cycle,
            acc.mac_pj, acc.l1_pj_per_byte, acc.l2_pj_per_byte, acc.dram_pj_per_byte, math.inf)


def cases(n):
    r = np.random.default_rng(0)
    t = pwl.build_elastic("gelu", (-8, 8), pwl.ElasticConfig(0.25, 0.02))
    X, K, B = (np.asarray(v, dtype=np.float64) for v in (t.breakpoints, t.k, t.b))
    xs = r.uniform(-9, 9, n)
    xs32 = xs.astype(np.float32)
    A = r.standard_normal((192, 256)).astype(np.float32)
    W = r.standard_normal((256, 128)).astype(np.float32)
    ext = kernels._ext
    g = grid_args(200, 150, 256, gemmsim.AcceleratorConfig())
    gi = g[:3] + tuple(np.ascontiguousarray(a) for a in g[3:6]) + g[6:]
    return [
        (f"segment_index ({t.n} seg, {n} x)", lambda: ext.segment_index(X, xs),
         lambda: kernels.segment_index_py(X, xs)),
        (f"pwl_eval f64 ({n} x)", lambda: ext.pwl_eval(X, K, B, xs), lambda: kernels.pwl_eval_py(X, K, B, xs)),
        (f"pwl_eval f32 ({n} x)", lambda: ext.pwl_eval_f32(X, K.astype(np.float32), B.astype(np.float32), xs32),
         lambda: kernels.pwl_eval_f32_py(X, K.astype(np.float32), B.astype(np.float32), xs32)),
        ("matmul_f32 192x256x128", lambda: ext.matmul_f32(A, W), lambda: kernels.matmul_f32_py(A, W)),
        ("search_grid 200x150x256", lambda: ext.search_grid(*gi), lambda: kernels.search_grid_py(*g)),
    ]


def same(a, b):
    if isinstance(a, np.ndarray):
        return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
    return a == b


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=1_000_000, help="elements for the PWL kernels")
    p.add_argument("--repeat", type=int, default=5, help="timing repeats; the best is reported")
    a = p.parse_args(argv)
    if kernels._ext is None:
        print("compiled core unavailable (not built, or NEUMAT_PURE set)", file=sys.stderr)
        return 1
    print(f"{'kernel':40s} {'compiled ms':>12s} {'numpy ms':>10s} {'speedup':>8s}  identical")
    ok = True
    for name, fast, slow in cases(a.n):
        tf = min(timeit.repeat(fast, number=1, repeat=a.repeat)) * 1e3
        ts = min(timeit.repeat(slow, number=1, repeat=a.repeat)) * 1e3
        eq = same(fast(), slow())
        ok &= eq
        print(f"{name:40s} {tf:12.2f} {ts:10.2f} {ts / tf:7.1f}x  {eq}")
    return 0 if ok else 2


if __name__ == "__main__":
    sys.exit(main())
