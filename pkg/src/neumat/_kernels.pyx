# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Every routine here has a numpy twin in ``kernels.py``
that produces bit-identical results."""

import numpy as np
cimport numpy as cnp
from libc.math cimport ceil

cnp.import_array()


cdef inline Py_ssize_t _bsearch(const double[::1] X, double x) noexcept nogil:
    # number of interior breakpoints X[1..n-1] that are <= x; NaN counts as +inf
    cdef Py_ssize_t lo = 1, hi = X.shape[0] - 1, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if x < X[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo - 1


def segment_index(const double[::1] X, const double[::1] xs):
    cdef Py_ssize_t i, m = xs.shape[0]
    out = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    with nogil:
        for i in range(m):
            o[i] = _bsearch(X, xs[i])
    return out


def pwl_eval(const double[::1] X, const double[::1] K, const double[::1] B, const double[::1] xs):
    cdef Py_ssize_t i, s, m = xs.shape[0]
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    cdef double x
    with nogil:
        for i in range(m):
            x = xs[i]
            s = _bsearch(X, x)
            o[i] = K[s] * x + B[s]
    return out


def pwl_eval_f32(const double[::1] X, const float[::1] K, const float[::1] B, const float[::1] xs):
    cdef Py_ssize_t i, s, m = xs.shape[0]
    out = np.empty(m, dtype=np.float32)
    cdef float[::1] o = out
    cdef float x, p
    with nogil:
        for i in range(m):
            x = xs[i]
            s = _bsearch(X, <double>x)
            p = K[s] * x
            o[i] = p + B[s]
    return out


def matmul_f32(const float[:, ::1] A, const float[:, ::1] B):
    """C = A @ B with float32 accumulation, k innermost, starting from +0."""
    cdef Py_ssize_t M = A.shape[0], Kd = A.shape[1], N = B.shape[1]
    cdef Py_ssize_t i, j, k
    cdef float acc, p
    out = np.empty((M, N), dtype=np.float32)
    cdef float[:, ::1] C = out
    with nogil:
        for i in range(M):
            for j in range(N):
                acc = 0.0
                for k in range(Kd):
                    p = A[i, k] * B[k, j]
                    acc = acc + p
                C[i, j] = acc
    return out


# ---------------------------------------------------------------- cost model

cdef struct Cost:
    int feasible          # 0 ok, 1 spatial, 2 l1, 3 l2
    double latency_cycles
    double energy_pj


cdef inline long long _cdiv(long long a, long long b) noexcept nogil:
    return (a + b - 1) // b


cdef inline long long _min(long long a, long long b) noexcept nogil:
    return a if a < b else b


cdef Cost _cost(long long M, long long K, long long N,
                long long tm, long long tk, long long tn,
                int pm, int pk, int pn, int stat,
                long long pe, long long clusters, long long l1, long long l2,
                long long w, double noc_bpc, double dram_bpc,
                double e_mac, double e_l1, double e_l2, double e_dram) noexcept nogil:
    cdef Cost c
    cdef long long Tm = _cdiv(M, tm), Tk = _cdiv(K, tk), Tn = _cdiv(N, tn)
    cdef long long em = _min(tm, M), ek = _min(tk, K), en = _min(tn, N)
    cdef long long spatial, compute, need_l1, cu, ws
    c.latency_cycles = 0.0
    c.energy_pj = 0.0

    if stat == 0:
        spatial = tm * tn
        compute = Tm * Tn * K
        need_l1 = 2 * w * (tm * tk + tk * tn)
    elif stat == 1:
        spatial = tk * tn
        compute = Tk * Tn * M
        need_l1 = 2 * w * (tm * tk + tm * tn)
    else:
        spatial = tm * tk
        compute = Tm * Tk * N
        need_l1 = 2 * w * (tk * tn + tm * tn)
    if spatial > pe:
        c.feasible = 1
        return c
    cu = _cdiv(spatial, pe // clusters)
    if need_l1 > cu * l1:
        c.feasible = 2
        return c
    ws = 2 * w * (tm * tk + tk * tn + tm * tn)
    if ws > l2:
        c.feasible = 3
        return c
    c.feasible = 0

    cdef long long baseA = w * M * K, baseB = w * K * N, baseC = w * M * N
    # refetch trips: operand is re-streamed across its independent loop when that
    # loop encloses one of the operand's own loops
    cdef long long rA = Tn if pn < (pm if pm > pk else pk) else 1
    cdef long long rB = Tm if pm < (pk if pk > pn else pn) else 1
    cdef long long rC = Tk if pk < (pm if pm > pn else pn) else 1
    cdef long long panA = w * (M if pm > pn else em) * (K if pk > pn else ek)
    cdef long long panB = w * (K if pk > pm else ek) * (N if pn > pm else en)
    cdef long long panC = w * (M if pm > pk else em) * (N if pn > pk else en)
    cdef long long sA = baseA * (rA - 1), sB = baseB * (rB - 1), sC = baseC * (2 * rC - 2)
    cdef long long room = l2 - ws
    cdef long long best_save = -1, save, used
    cdef int mask, best_mask = 0
    for mask in range(8):
        used = 0
        save = 0
        if mask & 1:
            if rA <= 1:
                continue
            used += panA
            save += sA
        if mask & 2:
            if rB <= 1:
                continue
            used += panB
            save += sB
        if mask & 4:
            if rC <= 1:
                continue
            used += panC
            save += sC
        if used <= room and save > best_save:
            best_save = save
            best_mask = mask
    cdef long long dram = baseA * (1 if best_mask & 1 else rA) \
        + baseB * (1 if best_mask & 2 else rB) \
        + baseC * (1 if best_mask & 4 else 2 * rC - 1)

    cdef long long nA = 1 if pn == 2 else Tn
    cdef long long nB = 1 if pm == 2 else Tm
    cdef long long moved = baseA * nA + baseB * nB + (baseC if pk == 2 else baseC * (2 * Tk - 1))

    cdef double noc = ceil(<double>moved / noc_bpc)
    cdef double dramc = ceil(<double>dram / dram_bpc)
    cdef double pro = ceil(<double>(w * (em * ek + ek * en)) / dram_bpc)
    cdef double epi = ceil(<double>(w * em * en) / dram_bpc)
    cdef double lat = <double>compute
    if noc > lat:
        lat = noc
    if dramc > lat:
        lat = dramc
    c.latency_cycles = lat + pro + epi

    cdef double macs = <double>(M * K * N)
    c.energy_pj = e_mac * macs + e_l1 * <double>(2 * moved) + e_l2 * <double>(moved + dram) + e_dram * <double>dram
    return c


def search_grid(long long M, long long K, long long N,
                const cnp.int64_t[::1] tiles, const cnp.int64_t[:, ::1] orders,
                const cnp.int64_t[::1] stats,
                long long pe, long long clusters, long long l1, long long l2, long long w,
                double noc_bpc, double dram_bpc,
                double e_mac, double e_l1, double e_l2, double e_dram,
                double budget_pj):
    """Exhaustive argmin over tiles^3 x orders x stationaries.

    Returns ``(best, counts)`` where ``best`` is ``(tm, tk, tn, order_row,
    stat_row, latency_cycles, energy_pj)`` or ``None`` and ``counts`` holds the
    number of configs rejected by [spatial, l1, l2, energy].
    """
    cdef Py_ssize_t nt = tiles.shape[0], no = orders.shape[0], ns = stats.shape[0]
    cdef Py_ssize_t a, b, d, o, s
    cdef Cost c
    cdef double best_lat = 0.0, best_e = 0.0
    cdef long long bm = 0, bk = 0, bn = 0
    cdef Py_ssize_t bo = 0, bs = 0
    cdef int found = 0, better
    cdef long long rej_sp = 0, rej_l1 = 0, rej_l2 = 0, rej_e = 0
    with nogil:
        for a in range(nt):
            for b in range(nt):
                for d in range(nt):
                    for o in range(no):
                        for s in range(ns):
                            c = _cost(M, K, N, tiles[a], tiles[b], tiles[d],
                                      orders[o, 0], orders[o, 1], orders[o, 2], <int>stats[s],
                                      pe, clusters, l1, l2, w, noc_bpc, dram_bpc,
                                      e_mac, e_l1, e_l2, e_dram)
                            if c.feasible == 1:
                                rej_sp += 1
                                continue
                            if c.feasible == 2:
                                rej_l1 += 1
                                continue
                            if c.feasible == 3:
                                rej_l2 += 1
                                continue
                            if c.energy_pj > budget_pj:
                                rej_e += 1
                                continue
                            # loops run in lexicographic (tile, order, stat) order,
                            # so strict improvement keeps the earliest tie
                            if not found:
                                better = 1
                            elif c.latency_cycles < best_lat:
                                better = 1
                            elif c.latency_cycles == best_lat and c.energy_pj < best_e:
                                better = 1
                            else:
                                better = 0
                            if better:
                                found = 1
                                best_lat = c.latency_cycles
                                best_e = c.energy_pj
                                bm = tiles[a]
                                bk = tiles[b]
                                bn = tiles[d]
                                bo = o
                                bs = s
    counts = (rej_sp, rej_l1, rej_l2, rej_e)
    if not found:
        return None, counts
    return (bm, bk, bn, bo, bs, best_lat, best_e), counts
