import numpy as np
import pytest
from hypothesis import given, strategies as st

from neumat import profiler, zoo
from neumat.errors import ArgumentError, StructuralError
from neumat.ir import Graph, Node


def gelu_graph():
    return zoo.single("GELU", (1, 1))


def test_minmax_example():
    cal = [{"x": np.array([[v]], np.float32)} for v in (-2.0, 0.0, 3.0)]
    rep = profiler.profile_ranges(gelu_graph(), cal)
    e = rep.entries["op"]
    assert (e.min, e.max, e.count, e.function) == (-2.0, 3.0, 3, "gelu")
    lo, hi = e.padded()
    assert lo == pytest.approx(-2.05) and hi == pytest.approx(3.05)


def test_percentile_vs_sort_oracle():
    r = np.random.default_rng(7)
    xs = r.uniform(0, 1, 1000).astype(np.float32)
    cal = [{"x": xs[i : i + 100].reshape(-1, 1)} for i in range(0, 1000, 100)]
    rep = profiler.profile_ranges(gelu_graph(), cal, "percentile:1")
    e = rep.entries["op"]
    s = np.sort(xs.astype(np.float64))
    # linear-interpolated order statistic at rank p/100 * (n - 1)
    def q(p):
        h = p / 100 * (len(s) - 1)
        i = int(np.floor(h))
        return s[i] + (h - i) * (s[min(i + 1, len(s) - 1)] - s[i])
    assert e.min == pytest.approx(q(1), abs=1e-12)
    assert e.max == pytest.approx(q(99), abs=1e-12)
    assert abs(e.min - 0.01) < 0.02 and abs(e.max - 0.99) < 0.02


def test_softmax_range_is_its_own_input():
    w = np.full((2, 4), 10.0, np.float32)
    g = Graph([("x", (1, 2))],
              [Node("mm", "Dense", ["x"], params={"weight": "w"}), Node("sm", "Softmax", ["mm"], {"axis": -1})],
              ["sm"], {"w": w * np.arange(1, 5, dtype=np.float32)})
    cal = [{"x": np.array([[1.0, 1.0]], np.float32)}]
    rep = profiler.profile_ranges(g, cal)
    # matmul output is [20, 40, 60, 80]; after the row max shift the exp sees [-60, 0]
    assert rep.entries["sm/exp"].min == -60.0 and rep.entries["sm/exp"].max == 0.0
    assert rep.entries["sm/reciprocal"].min == pytest.approx(1 + np.exp(-20.0) + np.exp(-40.0) + np.exp(-60.0), abs=1e-15)


def test_relu_input_equals_producer_output(rng):
    g = zoo.cnn()
    cal = [{"x": rng.standard_normal((1, 3, 8, 8)).astype(np.float32)} for _ in range(3)]
    rep = profiler.profile_ranges(g, cal)
    from neumat import ir
    outs = [ir.execute_reference(g, c, keep_all=True)["conv"] for c in cal]
    assert rep.entries["act"].min == min(float(o.min()) for o in outs)
    assert rep.entries["act"].max == max(float(o.max()) for o in outs)


@given(st.lists(st.floats(-100, 100, width=32), min_size=1, max_size=20),
       st.lists(st.floats(-100, 100, width=32), min_size=1, max_size=20))
def test_more_calibration_only_widens(a, b):
    g = gelu_graph()
    ca = [{"x": np.array([[v]], np.float32)} for v in a]
    cb = [{"x": np.array([[v]], np.float32)} for v in b]
    ra = profiler.profile_ranges(g, ca).entries["op"]
    rab = profiler.profile_ranges(g, ca + cb).entries["op"]
    assert rab.min <= ra.min and rab.max >= ra.max


def test_order_independent(rng):
    g = zoo.transformer_block()
    cal = [{"x": rng.standard_normal((8, 16)).astype(np.float32)} for _ in range(5)]
    a = profiler.profile_ranges(g, cal).to_dict()
    b = profiler.profile_ranges(g, cal[::-1]).to_dict()
    assert a == b


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("NEUMAT_THREADS", "3")
    assert profiler.thread_count() == 3
    monkeypatch.setenv("NEUMAT_THREADS", "x")
    with pytest.raises(ArgumentError):
        profiler.thread_count()


def test_errors():
    with pytest.raises(ArgumentError):
        profiler.profile_ranges(gelu_graph(), [])
    with pytest.raises(ArgumentError):
        profiler.parse_policy("median")
    with pytest.raises(ArgumentError):
        profiler.parse_policy("percentile:60")
    with pytest.raises(StructuralError):
        profiler.profile_ranges(gelu_graph(), [{"x": np.zeros((0, 1), np.float32)}])


def test_roundtrip(tmp_path, rng):
    g = zoo.transformer_block()
    rep = profiler.profile_ranges(g, [{"x": rng.standard_normal((8, 16)).astype(np.float32)}])
    p = tmp_path / "r.json"
    rep.save(p)
    back = profiler.RangeReport.load(p)
    assert back.to_dict() == rep.to_dict()
    assert back.entries == rep.entries


def test_padding_keeps_clear_of_pole():
    e = profiler.RangeEntry(1e-6, 1.0, 10, "reciprocal")
    lo, _ = e.padded()
    assert lo > 0
