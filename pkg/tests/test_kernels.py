"""The compiled core and the numpy fallback must agree bit for bit."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from neumat import gemmsim, kernels

compiled = pytest.mark.skipif(kernels._ext is None, reason="compiled extension not built")


@compiled
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=40, unique=True),
       st.lists(st.one_of(st.floats(-100, 100), st.just(float("nan"))), min_size=1, max_size=200))
def test_segment_index_and_eval_agree(bps, xs):
    X = np.sort(np.asarray(bps))
    xs = np.asarray(xs)
    n = X.size - 1
    K = np.linspace(-2, 3, n)
    B = np.linspace(1, -1, n)
    s_c = kernels._ext.segment_index(X, xs)
    s_p = kernels.segment_index_py(X, xs)
    np.testing.assert_array_equal(s_c, s_p)
    a = kernels._ext.pwl_eval(X, K, B, xs)
    b = kernels.pwl_eval_py(X, K, B, xs)
    assert np.array_equal(a, b, equal_nan=True)
    a32 = kernels._ext.pwl_eval_f32(X, K.astype(np.float32), B.astype(np.float32), xs.astype(np.float32))
    b32 = kernels.pwl_eval_f32_py(X, K, B, xs.astype(np.float32))
    assert a32.dtype == b32.dtype == np.float32
    assert np.array_equal(a32, b32, equal_nan=True)


@compiled
@given(st.integers(1, 17), st.integers(1, 33), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_matmul_f32_bit_identical(m, k, n, seed):
    r = np.random.default_rng(seed)
    A = r.standard_normal((m, k)).astype(np.float32)
    B = r.standard_normal((k, n)).astype(np.float32)
    c = kernels._ext.matmul_f32(A, B)
    p = kernels.matmul_f32_py(A, B)
    assert c.dtype == np.float32
    assert np.array_equal(c, p)


def test_matmul_k_innermost_order():
    A = np.array([[1e8, 1.0, -1e8]], dtype=np.float32)
    B = np.ones((3, 1), dtype=np.float32)
    # ((1e8 + 1) - 1e8) in float32 is 0
    assert kernels.matmul_f32(A, B)[0, 0] == 0.0
    assert kernels.matmul_f32_py(A, B)[0, 0] == 0.0


def _args(M, K, N, stats, budget=float("inf"), tiles=gemmsim.TILES):
    acc = gemmsim.AcceleratorConfig()
    return (M, K, N, np.asarray(tiles, np.int64), gemmsim._order_rows(gemmsim.ORDERS),
            np.asarray(stats, np.int64), acc.pe_count, acc.clusters, acc.l1_bytes, acc.l2_bytes,
            acc.word_bytes, acc.noc_bytes_per_cycle, acc.dram_bytes_per_cycle, acc.mac_pj,
            acc.l1_pj_per_byte, acc.l2_pj_per_byte, acc.dram_pj_per_byte, budget)


@compiled
@pytest.mark.parametrize("M,K,N", [(1, 1, 1), (64, 64, 64), (7, 513, 33), (256, 100, 3)])
@pytest.mark.parametrize("stats", [[0], [0, 1, 2]])
def test_search_grid_agrees(M, K, N, stats):
    assert kernels._ext.search_grid(*_args(M, K, N, stats)) == kernels.search_grid_py(*_args(M, K, N, stats))


@compiled
def test_search_grid_budget_agrees():
    a = _args(64, 64, 64, [0], budget=1.0)
    assert kernels._ext.search_grid(*a) == kernels.search_grid_py(*a)
    assert kernels._ext.search_grid(*a)[0] is None
