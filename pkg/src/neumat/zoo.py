"""Toy graphs used as fixtures by the tests, the benchmarks and the CLI."""

from __future__ import annotations

import numpy as np

from .ir import Graph, Node


def _rng(seed):
    return np.random.default_rng(seed)


def _glorot(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(np.float32)


def relu_only(shape=(4, 16)) -> Graph:
    return Graph([("x", shape)], [Node("relu", "ReLU", ["x"])], ["relu"])


def dense(d_in=4, d_out=4, weight=None, bias=None, batch=1) -> Graph:
    w = np.eye(d_in, d_out, dtype=np.float32) if weight is None else np.asarray(weight, np.float32)
    b = np.zeros(d_out, np.float32) if bias is None else np.asarray(bias, np.float32)
    return Graph([("x", (batch, d_in))], [Node("fc", "Dense", ["x"], params={"weight": "fc.w", "bias": "fc.b"})],
                 ["fc"], {"fc.w": w, "fc.b": b})


def single(kind, shape, **attrs) -> Graph:
    return Graph([("x", shape)], [Node("op", kind, ["x"], attrs)], ["op"])


def mlp(d_in=2, hidden=16, classes=2, act="GELU", seed=0, batch=32) -> Graph:
    """Dense -> act -> Dense classifier producing logits."""
    rng = _rng(seed)
    w = {
        "fc1.w": _glorot(rng, d_in, hidden, (d_in, hidden)),
        "fc1.b": np.zeros(hidden, np.float32),
        "fc2.w": _glorot(rng, hidden, classes, (hidden, classes)),
        "fc2.b": np.zeros(classes, np.float32),
    }
    act_node = Node("act", act, ["fc1"]) if act in ("GELU", "ReLU") else Node("act", "Nonlinear", ["fc1"], {"func": act})
    nodes = [
        Node("fc1", "Dense", ["x"], params={"weight": "fc1.w", "bias": "fc1.b"}),
        act_node,
        Node("fc2", "Dense", ["act"], params={"weight": "fc2.w", "bias": "fc2.b"}),
    ]
    return Graph([("x", (batch, d_in))], nodes, ["fc2"], w)


def cnn(seed=0, pool="MaxPool", act="ReLU", channels=3, size=8, filters=8, classes=10, batch=1) -> Graph:
    """Conv(3x3, pad 1) -> act -> pool(2) -> flatten -> Dense."""
    rng = _rng(seed)
    fan = channels * 9
    flat = filters * (size // 2) ** 2
    w = {
        "conv.w": _glorot(rng, fan, filters * 9, (filters, channels, 3, 3)),
        "conv.b": (0.1 * rng.standard_normal(filters)).astype(np.float32),
        "fc.w": _glorot(rng, flat, classes, (flat, classes)),
        "fc.b": np.zeros(classes, np.float32),
    }
    nodes = [
        Node("conv", "Conv2d", ["x"], {"stride": 1, "pad": 1, "kernel": 3}, {"weight": "conv.w", "bias": "conv.b"}),
        Node("act", act, ["conv"]),
        Node("pool", pool, ["act"], {"window": 2}),
        Node("flat", "Reshape", ["pool"], {"shape": [-1, flat]}),
        Node("fc", "Dense", ["flat"], params={"weight": "fc.w", "bias": "fc.b"}),
    ]
    return Graph([("x", (batch, channels, size, size))], nodes, ["fc"], w)


def transformer_block(seq=8, d=16, hidden=32, seed=0) -> Graph:
    """Single-head attention + LayerNorm + GELU feed-forward + LayerNorm.

    The attention scale 1/sqrt(d) is folded into the query weights.
    """
    rng = _rng(seed)

    def lin(name, a, b):
        return {f"{name}.w": _glorot(rng, a, b, (a, b)), f"{name}.b": (0.02 * rng.standard_normal(b)).astype(np.float32)}

    w = {}
    for name, a, b in (("q", d, d), ("k", d, d), ("v", d, d), ("o", d, d), ("ff1", d, hidden), ("ff2", hidden, d)):
        w.update(lin(name, a, b))
    w["q.w"] = w["q.w"] / np.float32(np.sqrt(d))
    w["q.b"] = w["q.b"] / np.float32(np.sqrt(d))
    for ln in ("ln1", "ln2"):
        w[f"{ln}.g"] = (1.0 + 0.1 * rng.standard_normal(d)).astype(np.float32)
        w[f"{ln}.b"] = (0.1 * rng.standard_normal(d)).astype(np.float32)

    def D(name, src):
        return Node(name, "Dense", [src], params={"weight": f"{name}.w", "bias": f"{name}.b"})

    nodes = [
        D("q", "x"), D("k", "x"), D("v", "x"),
        Node("kt", "Transpose", ["k"], {"perm": [1, 0]}),
        Node("scores", "MatMul", ["q", "kt"]),
        Node("attn", "Softmax", ["scores"], {"axis": -1}),
        Node("ctx", "MatMul", ["attn", "v"]),
        D("o", "ctx"),
        Node("res1", "ElemAdd", ["x", "o"]),
        Node("ln1", "LayerNorm", ["res1"], {"eps": 1e-5}, {"gamma": "ln1.g", "beta": "ln1.b"}),
        D("ff1", "ln1"),
        Node("gelu", "GELU", ["ff1"]),
        D("ff2", "gelu"),
        Node("res2", "ElemAdd", ["ln1", "ff2"]),
        Node("ln2", "LayerNorm", ["res2"], {"eps": 1e-5}, {"gamma": "ln2.g", "beta": "ln2.b"}),
    ]
    return Graph([("x", (seq, d))], nodes, ["ln2"], w)


def blobs(n=400, seed=0, separation=3.0, dim=2):
    """Two Gaussian classes; returns (features float32 [n, dim], labels int64 [n])."""
    rng = _rng(seed)
    y = np.arange(n) % 2
    centers = np.zeros((2, dim))
    centers[0, 0], centers[1, 0] = -separation / 2, separation / 2
    x = centers[y] + rng.standard_normal((n, dim))
    perm = rng.permutation(n)
    return x[perm].astype(np.float32), y[perm].astype(np.int64)
