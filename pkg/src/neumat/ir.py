"""Small neural-graph IR and its exact reference executor.

Tensors are plain ``numpy.float32`` arrays. Every graph input's leading axis
is a batch axis: the declared shape fixes it for validation and costing, but
execution accepts any batch size.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from . import funcs
from . import weights as weightfile
from .errors import ArgumentError, StructuralError

FORMAT = "neumat.graph/1"

LINEAR_KINDS = {"MatMul", "Dense", "Conv2d", "AddBias", "ElemAdd", "ElemMul", "AvgPool", "Transpose", "Reshape"}
EXACT_PWL_KINDS = {"ReLU", "MaxPool"}
APPROX_KINDS = {"GELU", "Softmax", "LayerNorm", "Nonlinear"}
KINDS = LINEAR_KINDS | EXACT_PWL_KINDS | APPROX_KINDS

# params each kind requires / tolerates
_PARAMS = {
    "Dense": ({"weight"}, {"bias"}),
    "Conv2d": ({"weight"}, {"bias"}),
    "AddBias": ({"bias"}, set()),
    "LayerNorm": (set(), {"gamma", "beta"}),
}


@dataclass
class Node:
    id: str
    kind: str
    inputs: list
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)


@dataclass
class Diagnostic:
    code: str
    message: str
    nodes: tuple = ()

    def __str__(self):
        return f"[{self.code}] {self.message}"


@dataclass
class Graph:
    inputs: list            # [(name, shape)]
    nodes: list
    outputs: list
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = [(n, tuple(int(d) for d in s)) for n, s in self.inputs]
        self._by_id = {n.id: n for n in self.nodes}

    def node(self, node_id: str) -> Node:
        return self._by_id[node_id]

    @property
    def input_names(self):
        return [n for n, _ in self.inputs]

    def param(self, node: Node, name: str):
        ref = node.params.get(name)
        if ref is None:
            return None
        return self.weights[ref]

    def topo_order(self) -> list:
        """Nodes in dependency order; declaration order breaks ties."""
        sources = set(self.input_names)
        indeg = {n.id: 0 for n in self.nodes}
        users = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                if src in users:
                    indeg[n.id] += 1
                    users[src].append(n.id)
                elif src not in sources:
                    raise StructuralError(f"node {n.id!r} reads unknown value {src!r}", node=n.id, edge=src)
        pos = {n.id: i for i, n in enumerate(self.nodes)}
        ready = sorted((i for i, d in indeg.items() if d == 0), key=pos.get)
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(self._by_id[nid])
            for u in users[nid]:
                indeg[u] -= 1
                if indeg[u] == 0:
                    ready.append(u)
            ready.sort(key=pos.get)
        if len(order) != len(self.nodes):
            raise StructuralError("graph has a cycle", nodes=_find_cycle(self))
        return order

    def param_count(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def nonlinear_nodes(self) -> list:
        return [n for n in self.nodes if n.kind in APPROX_KINDS]


def _find_cycle(graph: Graph) -> list:
    ids = {n.id for n in graph.nodes}
    state, stack = {}, []

    def visit(nid):
        state[nid] = 1
        stack.append(nid)
        for src in graph.node(nid).inputs:
            if src not in ids:
                continue
            if state.get(src) == 1:
                return stack[stack.index(src):]
            if src not in state:
                found = visit(src)
                if found:
                    return found
        stack.pop()
        state[nid] = 2
        return None

    for n in graph.nodes:
        if n.id not in state:
            cyc = visit(n.id)
            if cyc:
                return list(cyc)
    return []


# ---------------------------------------------------------------- shapes

def conv_out_hw(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _norm_axis(axis, rank):
    a = axis + rank if axis < 0 else axis
    if not 0 <= a < rank:
        raise StructuralError(f"axis {axis} out of range for rank {rank}")
    return a


def infer_shape(graph: Graph, node: Node, shapes: list) -> tuple:
    """Output shape of ``node`` given its input shapes; raises StructuralError."""
    k, a = node.kind, node.attrs

    def p(name):
        w = graph.param(node, name)
        return None if w is None else tuple(w.shape)

    if k == "MatMul":
        sa, sb = shapes
        if len(sa) < 2 or len(sb) < 2:
            raise StructuralError(f"MatMul {node.id!r} needs operands of rank >= 2")
        if sa[-1] != sb[-2]:
            raise StructuralError(
                f"MatMul {node.id!r}: inner dimensions differ, {node.inputs[0]!r} is "
                f"{'x'.join(map(str, sa))} and {node.inputs[1]!r} is {'x'.join(map(str, sb))}",
                node=node.id, edge=list(node.inputs),
            )
        if len(sb) > 2 and sa[:-2] != sb[:-2]:
            raise StructuralError(f"MatMul {node.id!r}: batch dimensions differ {sa[:-2]} vs {sb[:-2]}")
        return sa[:-1] + (sb[-1],)
    if k == "Dense":
        (sx,), sw = shapes, p("weight")
        if len(sw) != 2 or sx[-1] != sw[0]:
            raise StructuralError(f"Dense {node.id!r}: input features {sx[-1]} vs weight {sw}",
                                  node=node.id, edge=node.inputs[0])
        sb = p("bias")
        if sb is not None and sb != (sw[1],):
            raise StructuralError(f"Dense {node.id!r}: bias shape {sb} vs {sw[1]} outputs", node=node.id)
        return sx[:-1] + (sw[1],)
    if k == "Conv2d":
        (sx,), sw = shapes, p("weight")
        if len(sx) != 4 or len(sw) != 4 or sx[1] != sw[1]:
            raise StructuralError(f"Conv2d {node.id!r}: input {sx} vs weight {sw}", node=node.id, edge=node.inputs[0])
        stride, pad = int(a.get("stride", 1)), int(a.get("pad", 0))
        kh, kw = sw[2], sw[3]
        if "kernel" in a and tuple(np.atleast_1d(a["kernel"]).tolist()) not in ((kh,), (kh, kw)):
            raise StructuralError(f"Conv2d {node.id!r}: kernel attr {a['kernel']} vs weight {sw}")
        if kh > sx[2] + 2 * pad or kw > sx[3] + 2 * pad:
            raise StructuralError(f"Conv2d {node.id!r}: kernel larger than padded input", node=node.id)
        sb = p("bias")
        if sb is not None and sb != (sw[0],):
            raise StructuralError(f"Conv2d {node.id!r}: bias shape {sb}", node=node.id)
        return (sx[0], sw[0]) + conv_out_hw(sx[2], sx[3], kh, kw, stride, pad)
    if k == "AddBias":
        (sx,), sb = shapes, p("bias")
        ax = _norm_axis(int(a.get("axis", -1)), len(sx))
        if sb != (sx[ax],):
            raise StructuralError(f"AddBias {node.id!r}: bias {sb} vs axis length {sx[ax]}", node=node.id)
        return sx
    if k in ("ElemAdd", "ElemMul"):
        sa, sb = shapes
        try:
            out = np.broadcast_shapes(sa, sb)
        except ValueError:
            out = None
        if out != tuple(sa):
            raise StructuralError(f"{k} {node.id!r}: shapes {sa} and {sb} do not combine",
                                  node=node.id, edge=list(node.inputs))
        return sa
    if k in ("ReLU", "GELU", "Nonlinear"):
        if k == "Nonlinear":
            funcs.get(a.get("func"))
        return shapes[0]
    if k == "Softmax":
        _norm_axis(int(a.get("axis", -1)), len(shapes[0]))
        return shapes[0]
    if k == "LayerNorm":
        sx = shapes[0]
        ax = _norm_axis(int(a.get("axis", -1)), len(sx))
        if ax != len(sx) - 1:
            raise StructuralError(f"LayerNorm {node.id!r}: only the last axis is supported")
        if not float(a.get("eps", 1e-5)) > 0:
            raise StructuralError(f"LayerNorm {node.id!r}: eps must be > 0", node=node.id)
        for name in ("gamma", "beta"):
            s = p(name)
            if s is not None and s != (sx[-1],):
                raise StructuralError(f"LayerNorm {node.id!r}: {name} shape {s}", node=node.id)
        return sx
    if k in ("AvgPool", "MaxPool"):
        sx = shapes[0]
        win = int(a.get("window", 2))
        if len(sx) != 4 or sx[2] < win or sx[3] < win:
            raise StructuralError(f"{k} {node.id!r}: input {sx} vs window {win}", node=node.id)
        return (sx[0], sx[1], sx[2] // win, sx[3] // win)
    if k == "Transpose":
        perm = tuple(a["perm"])
        if sorted(perm) != list(range(len(shapes[0]))):
            raise StructuralError(f"Transpose {node.id!r}: bad permutation {perm}", node=node.id)
        return tuple(shapes[0][i] for i in perm)
    if k == "Reshape":
        sx = shapes[0]
        target = [int(d) for d in a["shape"]]
        total = math.prod(sx)
        if target.count(-1) > 1:
            raise StructuralError(f"Reshape {node.id!r}: more than one -1", node=node.id)
        if -1 in target:
            rest = math.prod(d for d in target if d != -1)
            if rest == 0 or total % rest:
                raise StructuralError(f"Reshape {node.id!r}: {sx} cannot become {target}", node=node.id)
            target[target.index(-1)] = total // rest
        if math.prod(target) != total:
            raise StructuralError(f"Reshape {node.id!r}: {sx} cannot become {target}", node=node.id)
        return tuple(target)
    raise StructuralError(f"unknown node kind {k!r}", node=node.id)


_ARITY = {"MatMul": 2, "ElemAdd": 2, "ElemMul": 2}


def validate_graph(graph: Graph) -> list:
    """Full structural check; returns diagnostics (empty list = valid)."""
    diags = []
    ids = [n.id for n in graph.nodes]
    seen = set()
    for nid in ids:
        if nid in seen:
            diags.append(Diagnostic("duplicate-id", f"node id {nid!r} is used twice", (nid,)))
        seen.add(nid)
    names = set(graph.input_names)
    for n in graph.nodes:
        if n.id in names:
            diags.append(Diagnostic("duplicate-id", f"node id {n.id!r} shadows a graph input", (n.id,)))
        if n.kind not in KINDS:
            diags.append(Diagnostic("unknown-kind", f"node {n.id!r} has unknown kind {n.kind!r}", (n.id,)))
            continue
        want = _ARITY.get(n.kind, 1)
        if len(n.inputs) != want:
            diags.append(Diagnostic("arity", f"{n.kind} {n.id!r} takes {want} inputs, got {len(n.inputs)}", (n.id,)))
        required, optional = _PARAMS.get(n.kind, (set(), set()))
        for pname in required - set(n.params):
            diags.append(Diagnostic("missing-param", f"{n.kind} {n.id!r} needs param {pname!r}", (n.id,)))
        for pname in set(n.params) - required - optional:
            diags.append(Diagnostic("unknown-param", f"{n.kind} {n.id!r} does not take param {pname!r}", (n.id,)))
        for pname, ref in n.params.items():
            if ref not in graph.weights:
                diags.append(Diagnostic("missing-weight", f"{n.id!r}.{pname} refers to absent tensor {ref!r}", (n.id,)))
        for src in n.inputs:
            if src not in seen and src not in names:
                diags.append(Diagnostic("dangling-edge", f"node {n.id!r} reads unknown value {src!r}", (n.id, src)))
    for out in graph.outputs:
        if out not in seen and out not in names:
            diags.append(Diagnostic("dangling-output", f"output {out!r} is not produced by any node", (out,)))
    if diags:
        return diags

    try:
        order = graph.topo_order()
    except StructuralError as e:
        cyc = tuple(e.context.get("nodes", ()))
        return [Diagnostic("cycle", "cycle through nodes " + " -> ".join(cyc), cyc)]

    shapes = dict(graph.inputs)
    for n in order:
        if any(src not in shapes for src in n.inputs):
            continue  # upstream already reported
        try:
            shapes[n.id] = infer_shape(graph, n, [shapes[s] for s in n.inputs])
        except StructuralError as e:
            edge = e.context.get("edge", ())
            edge = tuple(edge) if isinstance(edge, (list, tuple)) else (edge,)
            diags.append(Diagnostic("shape", e.message, (n.id,) + tuple(x for x in edge if x)))
        except Exception as e:  # bad attrs
            diags.append(Diagnostic("attrs", f"{n.kind} {n.id!r}: {e}", (n.id,)))

    # every node must feed some output
    live, stack = set(), list(graph.outputs)
    while stack:
        v = stack.pop()
        if v in live or v in names:
            continue
        live.add(v)
        stack.extend(graph.node(v).inputs)
    for n in graph.nodes:
        if n.id not in live:
            diags.append(Diagnostic("dead-node", f"node {n.id!r} does not reach any output", (n.id,)))
    return diags


def infer_shapes(graph: Graph) -> dict:
    diags = validate_graph(graph)
    if diags:
        raise StructuralError("; ".join(map(str, diags)), diagnostics=[str(d) for d in diags])
    shapes = dict(graph.inputs)
    for n in graph.topo_order():
        shapes[n.id] = infer_shape(graph, n, [shapes[s] for s in n.inputs])
    return shapes


# ---------------------------------------------------------------- reference semantics

def conv2d_reference(x, w, bias=None, stride=1, pad=0):
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, w.shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bchwij,fcij->bfhw", win, w, dtype=np.float32)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float32)[None, :, None, None]
    return out.astype(np.float32)


def _pool(x, win, op):
    b, c, h, w = x.shape
    ho, wo = h // win, w // win
    v = x[:, :, : ho * win, : wo * win].reshape(b, c, ho, win, wo, win)
    return op(v, axis=(3, 5))


def softmax_reference(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return (z / z.sum(axis=axis, keepdims=True)).astype(np.float32)


def gelu_reference(x):
    x = np.asarray(x, dtype=np.float64)
    return (0.5 * x * (1.0 + special.erf(x / math.sqrt(2.0)))).astype(np.float32)


def layernorm_reference(x, eps, gamma=None, beta=None):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y.astype(np.float32)


def eval_node(graph: Graph, node: Node, args: list) -> np.ndarray:
    """Exact semantics of one node."""
    k, a = node.kind, node.attrs
    p = lambda name: graph.param(node, name)  # noqa: E731
    if k == "MatMul":
        return np.matmul(args[0], args[1]).astype(np.float32)
    if k == "Dense":
        y = np.matmul(args[0], p("weight"))
        if p("bias") is not None:
            y = y + p("bias")
        return y.astype(np.float32)
    if k == "Conv2d":
        return conv2d_reference(args[0], p("weight"), p("bias"), int(a.get("stride", 1)), int(a.get("pad", 0)))
    if k == "AddBias":
        x = args[0]
        ax = _norm_axis(int(a.get("axis", -1)), x.ndim)
        shape = [1] * x.ndim
        shape[ax] = -1
        return (x + p("bias").reshape(shape)).astype(np.float32)
    if k == "ElemAdd":
        return (args[0] + args[1]).astype(np.float32)
    if k == "ElemMul":
        return (args[0] * args[1]).astype(np.float32)
    if k == "ReLU":
        return np.maximum(args[0], np.float32(0))
    if k == "GELU":
        return gelu_reference(args[0])
    if k == "Nonlinear":
        return np.asarray(funcs.get(a["func"])(np.asarray(args[0], dtype=np.float64)), dtype=np.float32)
    if k == "Softmax":
        return softmax_reference(args[0], int(a.get("axis", -1)))
    if k == "LayerNorm":
        return layernorm_reference(args[0], float(a.get("eps", 1e-5)), p("gamma"), p("beta"))
    if k == "AvgPool":
        return _pool(args[0], int(a.get("window", 2)), np.mean).astype(np.float32)
    if k == "MaxPool":
        return _pool(args[0], int(a.get("window", 2)), np.max)
    if k == "Transpose":
        return np.ascontiguousarray(np.transpose(args[0], a["perm"]))
    if k == "Reshape":
        return args[0].reshape(tuple(a["shape"]))
    raise StructuralError(f"unknown node kind {k!r}", node=node.id)


def _bind_inputs(graph: Graph, inputs: dict) -> dict:
    env = {}
    for name, shape in graph.inputs:
        if name not in inputs:
            raise StructuralError(f"missing graph input {name!r}", edge=name)
        x = np.asarray(inputs[name], dtype=np.float32)
        if x.shape[1:] != shape[1:] or x.ndim != len(shape):
            raise StructuralError(f"input {name!r} has shape {x.shape}, graph expects {shape} (any batch)",
                                  edge=name)
        env[name] = x
    return env


def execute_reference(graph: Graph, inputs: dict, keep_all: bool = False) -> dict:
    """Run the graph with exact nonlinearities.

    Returns the named outputs, or every intermediate when ``keep_all``.
    """
    env = _bind_inputs(graph, inputs)
    for node in graph.topo_order():
        args = [env[s] for s in node.inputs]
        try:
            env[node.id] = eval_node(graph, node, args)
        except ValueError as e:
            raise StructuralError(f"node {node.id!r}: {e}", node=node.id, edge=list(node.inputs)) from None
    if keep_all:
        return env
    return {o: env[o] for o in graph.outputs}


# ---------------------------------------------------------------- (de)serialization

def graph_to_dict(graph: Graph, weights_file: Optional[str] = None) -> dict:
    d = {
        "format": FORMAT,
        "inputs": [{"name": n, "shape": list(s)} for n, s in graph.inputs],
        "nodes": [
            {"id": n.id, "kind": n.kind, "attrs": n.attrs, "inputs": list(n.inputs), "params": dict(n.params)}
            for n in graph.nodes
        ],
        "outputs": list(graph.outputs),
    }
    if weights_file is not None:
        d["weights"] = weights_file
    return d


def graph_from_dict(d: dict, weights: Optional[dict] = None) -> Graph:
    try:
        nodes = [Node(n["id"], n["kind"], list(n.get("inputs", [])), dict(n.get("attrs", {})),
                      dict(n.get("params", {}))) for n in d["nodes"]]
        inputs = [(i["name"], i["shape"]) for i in d["inputs"]]
        return Graph(inputs, nodes, list(d["outputs"]), dict(weights or {}))
    except (KeyError, TypeError) as e:
        raise ArgumentError(f"malformed graph JSON: missing {e}") from None


def save_graph(graph: Graph, path) -> None:
    path = os.fspath(path)
    wname = os.path.splitext(os.path.basename(path))[0] + ".nmwt"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(graph, wname), fh, indent=1, sort_keys=True)
        fh.write("\n")
    weightfile.save(graph.weights, os.path.join(os.path.dirname(path), wname))


def load_graph(path) -> Graph:
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    w = {}
    if d.get("weights"):
        w = weightfile.load(os.path.join(os.path.dirname(path), d["weights"]))
    return graph_from_dict(d, w)
