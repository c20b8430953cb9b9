import numpy as np
import pytest
from hypothesis import given, strategies as st

from neumat import ir, zoo
from neumat.errors import StructuralError
from neumat.ir import Graph, Node


def test_identity_dense_passthrough(rng):
    x = rng.standard_normal((3, 4)).astype(np.float32)
    out = ir.execute_reference(zoo.dense(4, 4, batch=3), {"x": x})
    np.testing.assert_array_equal(out["fc"], x)


def test_softmax_uniform_row():
    out = ir.execute_reference(zoo.single("Softmax", (1, 4), axis=-1), {"x": np.zeros((1, 4), np.float32)})
    np.testing.assert_array_equal(out["op"], np.full((1, 4), 0.25, np.float32))


def test_conv_output_shape():
    r = np.random.default_rng(0)
    g = Graph([("x", (1, 3, 8, 8))],
              [Node("c", "Conv2d", ["x"], {"stride": 1, "pad": 1}, {"weight": "w", "bias": "b"})],
              ["c"], {"w": r.standard_normal((16, 3, 3, 3)).astype(np.float32), "b": np.zeros(16, np.float32)})
    assert ir.infer_shapes(g)["c"] == (1, 16, 8, 8)
    out = ir.execute_reference(g, {"x": r.standard_normal((1, 3, 8, 8))})
    assert out["c"].shape == (1, 16, 8, 8) and out["c"].dtype == np.float32


def direct_conv(x, w, b, stride, pad):
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, F, ho, wo))
    for n in range(B):
        for f in range(F):
            for i in range(ho):
                for j in range(wo):
                    s = b[f]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[n, c, i * stride + u, j * stride + v] * w[f, c, u, v]
                    out[n, f, i, j] = s
    return out


def test_conv_reference_vs_direct(rng):
    x = rng.standard_normal((2, 2, 5, 6)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 2)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    got = ir.conv2d_reference(x, w, b, stride=2, pad=1)
    np.testing.assert_allclose(got, direct_conv(x, w, b, 2, 1), atol=1e-5)


def test_validate_clean_mlp():
    assert ir.validate_graph(zoo.mlp()) == []
    assert ir.validate_graph(zoo.cnn()) == []
    assert ir.validate_graph(zoo.transformer_block()) == []


def test_validate_inner_dim_mismatch():
    g = Graph([("a", (3, 4)), ("b", (5, 2))], [Node("mm", "MatMul", ["a", "b"])], ["mm"])
    d = ir.validate_graph(g)
    assert len(d) == 1
    assert d[0].code == "shape"
    assert set(d[0].nodes) >= {"a", "b"} or "mm" in d[0].nodes


def test_validate_cycle_lists_nodes():
    g = Graph([("x", (2, 2))],
              [Node("p", "ElemAdd", ["x", "q"]), Node("q", "ReLU", ["p"]), Node("r", "ReLU", ["x"])], ["r"])
    d = [x for x in ir.validate_graph(g) if x.code == "cycle"]
    assert d and set(d[0].nodes) == {"p", "q"}
    with pytest.raises(StructuralError):
        g.topo_order()


def test_shape_mismatch_names_edge():
    with pytest.raises(StructuralError) as e:
        ir.execute_reference(zoo.dense(4, 4), {"x": np.zeros((1, 5), np.float32)})
    assert e.value.context.get("edge") == "x"


@given(st.integers(1, 5), st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(b, c, seed):
    x = (np.random.default_rng(seed).standard_normal((b, c)) * 10).astype(np.float32)
    y = ir.softmax_reference(x)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


@given(st.integers(1, 4), st.integers(2, 32), st.integers(0, 2**31 - 1))
def test_layernorm_moments(b, c, seed):
    x = (np.random.default_rng(seed).standard_normal((b, c)) * 3 + 1).astype(np.float32)
    y = ir.layernorm_reference(x, 1e-5).astype(np.float64)
    assert np.all(np.abs(y.mean(axis=-1)) <= 1e-6)
    var = y.var(axis=-1)
    # eps shrinks the variance by var/(var+eps)
    np.testing.assert_allclose(var, 1.0, atol=1e-5 + 1e-5 / x.astype(np.float64).var(axis=-1).min())


@given(st.integers(0, 2**31 - 1))
def test_maxpool_dominates_avgpool(seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 6, 6)).astype(np.float32)
    mx = ir.execute_reference(zoo.single("MaxPool", (1, 2, 6, 6), window=2), {"x": x})["op"]
    av = ir.execute_reference(zoo.single("AvgPool", (1, 2, 6, 6), window=2), {"x": x})["op"]
    assert np.all(mx >= av)


def test_deterministic(rng):
    g = zoo.transformer_block()
    x = rng.standard_normal((8, 16)).astype(np.float32)
    a = ir.execute_reference(g, {"x": x})["ln2"]
    b = ir.execute_reference(g, {"x": x})["ln2"]
    assert np.array_equal(a, b)


def test_graph_roundtrip(tmp_path):
    g = zoo.cnn()
    p = tmp_path / "g.json"
    ir.save_graph(g, p)
    back = ir.load_graph(p)
    assert ir.graph_to_dict(back) == ir.graph_to_dict(g)
    for k, v in g.weights.items():
        np.testing.assert_array_equal(back.weights[k], v)


def test_weights_roundtrip_and_truncation(tmp_path):
    from neumat import weights
    from neumat.errors import ArgumentError
    t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(2.5).reshape(())}
    raw = weights.dumps(t)
    back = weights.loads(raw)
    np.testing.assert_array_equal(back["a"], t["a"])
    assert back["s"].shape == ()
    with pytest.raises(ArgumentError):
        weights.loads(raw[:-3])
    with pytest.raises(ArgumentError):
        weights.loads(b"XXXX" + raw[4:])
