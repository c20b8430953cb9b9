"""Hot kernels with a compiled core and a numpy fallback.

The compiled module ``neumat._kernels`` is used when it imports and
``NEUMAT_PURE`` is unset. Both paths give bit-identical results; the
fallback exists for platforms without a compiler and as a cross-check.
"""

from __future__ import annotations

import os

import numpy as np

try:
    if os.environ.get("NEUMAT_PURE"):
        raise ImportError("NEUMAT_PURE set")
    from . import _kernels as _ext
except ImportError:  # pragma: no cover - depends on the build
    _ext = None

BACKEND = "compiled" if _ext is not None else "numpy"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _f32(a):
    return np.ascontiguousarray(a, dtype=np.float32)


# ------------------------------------------------------------------ numpy twins

def segment_index_py(X, xs):
    X = _f64(X)
    return np.searchsorted(X[1:-1], _f64(xs), side="right").astype(np.int64)


def pwl_eval_py(X, K, B, xs):
    xs = _f64(xs)
    s = segment_index_py(X, xs)
    return _f64(K)[s] * xs + _f64(B)[s]


def pwl_eval_f32_py(X, K, B, xs):
    xs = _f32(xs)
    s = segment_index_py(X, xs.astype(np.float64))
    return _f32(K)[s] * xs + _f32(B)[s]


def matmul_f32_py(A, B):
    A, B = _f32(A), _f32(B)
    out = np.zeros((A.shape[0], B.shape[1]), dtype=np.float32)
    # one rank-1 update per k keeps each output's summation order k = 0, 1, ...
    for k in range(A.shape[1]):
        out += A[:, k : k + 1] * B[k : k + 1, :]
    return out


def cost_grid_py(M, K, N, tm, tk, tn, pm, pk, pn, stat,
                 pe, clusters, l1, l2, w, noc_bpc, dram_bpc,
                 e_mac, e_l1, e_l2, e_dram):
    """Vectorized cost model over tile arrays for one loop order and stationary.

    Returns ``(status, latency_cycles, energy_pj)``; status 0 means feasible,
    1/2/3 name the violated spatial/L1/L2 budget.
    """
    tm, tk, tn = (np.asarray(t, dtype=np.int64) for t in (tm, tk, tn))
    Tm, Tk, Tn = -(-M // tm), -(-K // tk), -(-N // tn)
    em, ek, en = np.minimum(tm, M), np.minimum(tk, K), np.minimum(tn, N)
    if stat == 0:
        spatial, compute, need_l1 = tm * tn, Tm * Tn * K, 2 * w * (tm * tk + tk * tn)
    elif stat == 1:
        spatial, compute, need_l1 = tk * tn, Tk * Tn * M, 2 * w * (tm * tk + tm * tn)
    else:
        spatial, compute, need_l1 = tm * tk, Tm * Tk * N, 2 * w * (tk * tn + tm * tn)
    cu = -(-spatial // (pe // clusters))
    ws = 2 * w * (tm * tk + tk * tn + tm * tn)
    status = np.zeros(tm.shape, dtype=np.int64)
    status[ws > l2] = 3
    status[need_l1 > cu * l1] = 2
    status[spatial > pe] = 1

    baseA, baseB, baseC = w * M * K, w * K * N, w * M * N
    one = np.ones_like(tm)
    rA = Tn if pn < max(pm, pk) else one
    rB = Tm if pm < max(pk, pn) else one
    rC = Tk if pk < max(pm, pn) else one
    panA = w * (M if pm > pn else em) * (K if pk > pn else ek)
    panB = w * (K if pk > pm else ek) * (N if pn > pm else en)
    panC = w * (M if pm > pk else em) * (N if pn > pk else en)
    sA, sB, sC = baseA * (rA - 1), baseB * (rB - 1), baseC * (2 * rC - 2)
    room = l2 - ws
    best_save = np.full(tm.shape, -1, dtype=np.int64)
    best_mask = np.zeros(tm.shape, dtype=np.int64)
    for mask in range(8):
        used = np.zeros(tm.shape, dtype=np.int64)
        save = np.zeros(tm.shape, dtype=np.int64)
        ok = np.ones(tm.shape, dtype=bool)
        for bit, r, pan, s in ((1, rA, panA, sA), (2, rB, panB, sB), (4, rC, panC, sC)):
            if mask & bit:
                ok &= r > 1
                used = used + pan
                save = save + s
        take = ok & (used <= room) & (save > best_save)
        best_save = np.where(take, save, best_save)
        best_mask = np.where(take, mask, best_mask)
    dram = (baseA * np.where(best_mask & 1, 1, rA)
            + baseB * np.where(best_mask & 2, 1, rB)
            + baseC * np.where(best_mask & 4, 1, 2 * rC - 1))
    nA = 1 if pn == 2 else Tn
    nB = 1 if pm == 2 else Tm
    moved = baseA * nA + baseB * nB + (baseC if pk == 2 else baseC * (2 * Tk - 1))

    noc = np.ceil(moved.astype(np.float64) / noc_bpc)
    dramc = np.ceil(dram.astype(np.float64) / dram_bpc)
    pro = np.ceil((w * (em * ek + ek * en)).astype(np.float64) / dram_bpc)
    epi = np.ceil((w * em * en).astype(np.float64) / dram_bpc)
    lat = np.maximum(np.maximum(compute.astype(np.float64), noc), dramc)
    latency = lat + pro + epi
    macs = float(M * K * N)
    energy = (e_mac * macs + e_l1 * (2 * moved).astype(np.float64)
              + e_l2 * (moved + dram).astype(np.float64) + e_dram * dram.astype(np.float64))
    return status, latency, energy


def search_grid_py(M, K, N, tiles, orders, stats, pe, clusters, l1, l2, w,
                   noc_bpc, dram_bpc, e_mac, e_l1, e_l2, e_dram, budget_pj):
    tiles = np.asarray(tiles, dtype=np.int64)
    orders = np.asarray(orders, dtype=np.int64)
    stats = np.asarray(stats, dtype=np.int64)
    gm, gk, gn = (g.ravel() for g in np.meshgrid(tiles, tiles, tiles, indexing="ij"))
    no, ns = len(orders), len(stats)
    # layout [tile_combo, order, stat] flattened in lexicographic loop order
    status = np.empty((gm.size, no, ns), dtype=np.int64)
    lat = np.empty((gm.size, no, ns))
    en = np.empty((gm.size, no, ns))
    for o in range(no):
        pm, pk, pn = (int(v) for v in orders[o])
        for s in range(ns):
            st, la, e = cost_grid_py(M, K, N, gm, gk, gn, pm, pk, pn, int(stats[s]),
                                     pe, clusters, l1, l2, w, noc_bpc, dram_bpc,
                                     e_mac, e_l1, e_l2, e_dram)
            status[:, o, s], lat[:, o, s], en[:, o, s] = st, la, e
    status, lat, en = status.ravel(), lat.ravel(), en.ravel()
    over = (status == 0) & (en > budget_pj)
    counts = (int((status == 1).sum()), int((status == 2).sum()),
              int((status == 3).sum()), int(over.sum()))
    ok = (status == 0) & ~over
    if not ok.any():
        return None, counts
    idx = np.flatnonzero(ok)
    # lexsort: last key is primary; flat index is the lexicographic tie-break
    pick = idx[np.lexsort((idx, en[idx], lat[idx]))[0]]
    combo, rest = divmod(int(pick), no * ns)
    o, s = divmod(rest, ns)
    return (int(gm[combo]), int(gk[combo]), int(gn[combo]), o, s,
            float(lat[pick]), float(en[pick])), counts


# ------------------------------------------------------------------ dispatch

def segment_index(X, xs):
    if _ext is not None:
        return _ext.segment_index(_f64(X), _f64(xs))
    return segment_index_py(X, xs)


def pwl_eval(X, K, B, xs):
    if _ext is not None:
        return _ext.pwl_eval(_f64(X), _f64(K), _f64(B), _f64(xs))
    return pwl_eval_py(X, K, B, xs)


def pwl_eval_f32(X, K, B, xs):
    if _ext is not None:
        return _ext.pwl_eval_f32(_f64(X), _f32(K), _f32(B), _f32(xs))
    return pwl_eval_f32_py(X, K, B, xs)


def matmul_f32(A, B):
    if _ext is not None:
        return _ext.matmul_f32(_f32(A), _f32(B))
    return matmul_f32_py(A, B)


def search_grid(*args):
    if _ext is not None:
        M, K, N, tiles, orders, stats, *rest = args
        return _ext.search_grid(
            M, K, N,
            np.ascontiguousarray(tiles, dtype=np.int64),
            np.ascontiguousarray(orders, dtype=np.int64),
            np.ascontiguousarray(stats, dtype=np.int64),
            *rest,
        )
    return search_grid_py(*args)
