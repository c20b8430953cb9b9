"""Lower a :class:`~neumat.ir.Graph` to a plan made only of matrix-unit work.

The closed primitive set:

``matmul``     (..., M, K) x (K, N) or batched (..., K, N)
``add``, ``mul``  elementwise, second operand may broadcast into the first
``affine``     ``a*x + b`` with scalar ``a``, ``b``
``pwl``        segment lookup, gather ``(k, b)``, multiply-add
``im2col``, ``gather``, ``transpose``, ``reshape``   index/layout only

ReLU and MaxPool lower exactly; GELU, Softmax, LayerNorm and other
nonlinear nodes need tables keyed by :func:`required_tables`.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import funcs, ir, kernels, pwl
from . import weights as weightfile
from .errors import ArgumentError, StructuralError

log = logging.getLogger(__name__)

FORMAT = "neumat.plan/1"
PRIMITIVE_KINDS = ("matmul", "add", "mul", "affine", "pwl", "im2col", "gather", "transpose", "reshape")
LAYOUT_KINDS = ("im2col", "gather", "transpose", "reshape")
RELU_REF = "relu"


@dataclass
class Primitive:
    kind: str
    inputs: list
    output: str
    attrs: dict = field(default_factory=dict)
    source: str = ""


@dataclass
class LoweredPlan:
    inputs: list                      # [(name, shape)]
    outputs: dict                     # graph output id -> slot
    prims: list
    slots: dict                       # slot -> declared shape
    constants: dict                   # slot -> float32 array
    tables: dict                      # ref -> PwlTable
    trainable: list = field(default_factory=list)
    node_slots: dict = field(default_factory=dict)
    quant: Optional[dict] = None
    source: Optional[ir.Graph] = None
    warnings: list = field(default_factory=list)

    def kinds(self) -> list:
        return [p.kind for p in self.prims]

    def copy(self) -> "LoweredPlan":
        return LoweredPlan(
            list(self.inputs), dict(self.outputs), [Primitive(p.kind, list(p.inputs), p.output, dict(p.attrs), p.source)
                                                    for p in self.prims],
            dict(self.slots), {k: v.copy() for k, v in self.constants.items()}, dict(self.tables),
            list(self.trainable), dict(self.node_slots),
            None if self.quant is None else json.loads(json.dumps(self.quant)),
            self.source, list(self.warnings),
        )


# ---------------------------------------------------------------- im2col

@dataclass(frozen=True)
class Im2col:
    """Index map turning a convolution into one matrix product.

    ``index[p, q]`` is the flat ``(c, h, w)`` input position feeding output
    pixel ``p`` and column ``q = (c, i, j)``, or -1 where the window covers
    padding.
    """

    in_shape: tuple      # (C, H, W)
    kernel: tuple        # (kh, kw)
    stride: int
    pad: int
    out_hw: tuple
    index: np.ndarray

    @property
    def a_shape(self):
        return (self.out_hw[0] * self.out_hw[1], self.index.shape[1])

    def b_shape(self, filters: int):
        return (self.index.shape[1], filters)

    def apply(self, x):
        """(B, C, H, W) -> (B*H'*W', C*kh*kw)."""
        b = x.shape[0]
        flat = x.reshape(b, -1)
        ext = np.concatenate([flat, np.zeros((b, 1), dtype=x.dtype)], axis=1)
        cols = ext[:, self.index]  # -1 picks the trailing zero
        return cols.reshape(b * self.index.shape[0], self.index.shape[1])

    def apply_transpose(self, g, batch: int):
        """Adjoint of :meth:`apply` (scatter-add back to the input)."""
        C, H, W = self.in_shape
        g = g.reshape(batch, self.index.shape[0], self.index.shape[1])
        out = np.zeros((batch, C * H * W + 1), dtype=g.dtype)
        idx = np.where(self.index < 0, C * H * W, self.index)
        for bi in range(batch):
            np.add.at(out[bi], idx, g[bi])
        return out[:, :-1].reshape(batch, C, H, W)


def im2col(in_shape, kernel, stride: int = 1, pad: int = 0) -> Im2col:
    """Index map for a convolution over a ``(C, H, W)`` input (batch excluded)."""
    if len(in_shape) == 4:
        in_shape = in_shape[1:]
    C, H, W = (int(v) for v in in_shape)
    kh, kw = (int(kernel), int(kernel)) if np.ndim(kernel) == 0 else (int(kernel[0]), int(kernel[1]))
    stride, pad = int(stride), int(pad)
    if stride < 1 or pad < 0 or kh < 1 or kw < 1:
        raise ArgumentError("stride must be >= 1, pad >= 0, kernel >= 1")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ArgumentError(f"kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    ho, wo = ir.conv_out_hw(H, W, kh, kw, stride, pad)
    oh, ow = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    c, i, j = np.meshgrid(np.arange(C), np.arange(kh), np.arange(kw), indexing="ij")
    rows = oh.reshape(-1, 1) * stride - pad + i.reshape(1, -1)
    cols = ow.reshape(-1, 1) * stride - pad + j.reshape(1, -1)
    inside = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    index = np.where(inside, c.reshape(1, -1) * H * W + rows * W + cols, -1).astype(np.int64)
    index.flags.writeable = False
    return Im2col((C, H, W), (kh, kw), stride, pad, (ho, wo), index)


# ---------------------------------------------------------------- table requirements

def required_tables(graph: ir.Graph) -> dict:
    """Table key -> function name for every approximated operator."""
    need = {}
    for n in graph.nodes:
        if n.kind == "GELU":
            need[n.id] = "gelu"
        elif n.kind == "Nonlinear":
            need[n.id] = funcs.get(n.attrs["func"]).name
        elif n.kind == "Softmax":
            need[f"{n.id}/exp"] = "exp"
            need[f"{n.id}/reciprocal"] = "reciprocal"
        elif n.kind == "LayerNorm":
            need[f"{n.id}/rsqrt"] = "rsqrt"
    return need


# ---------------------------------------------------------------- lowering

class _Builder:
    def __init__(self, graph: ir.Graph, tables: dict, shapes: dict):
        self.graph = graph
        self.tables_in = tables
        self.shapes = dict(shapes)
        self.prims = []
        self.constants = {}
        self.trainable = []
        self.tables = {}
        self.node = None
        self._n = {}

    def fresh(self, tag: str) -> str:
        key = f"{self.node.id}.{tag}"
        i = self._n.get(key, 0)
        self._n[key] = i + 1
        return key if i == 0 else f"{key}{i}"

    def const(self, tag, value, trainable=False) -> str:
        name = f"const:{self.node.id}.{tag}"
        self.constants[name] = np.ascontiguousarray(value, dtype=np.float32)
        self.shapes[name] = self.constants[name].shape
        if trainable:
            self.trainable.append(name)
        return name

    def emit(self, kind, inputs, slot_shape, out=None, **attrs) -> str:
        out = out or self.fresh(kind)
        self.prims.append(Primitive(kind, list(inputs), out, attrs, self.node.id))
        self.shapes[out] = tuple(int(d) for d in slot_shape)
        return out

    def table(self, key, func_name) -> str:
        if key == RELU_REF:
            self.tables[RELU_REF] = pwl.relu_table()
            return RELU_REF
        if key not in self.tables_in:
            raise ArgumentError(f"no table for node {self.node.id!r} (key {key!r}, {func_name})",
                                node=self.node.id, table=key)
        t = self.tables_in[key]
        if t.function != func_name:
            raise ArgumentError(f"table {key!r} approximates {t.function}, node needs {func_name}", table=key)
        self.tables[key] = t
        return key

    # helpers built from primitives
    def neg(self, x) -> str:
        return self.emit("affine", [x], self.shapes[x], a=-1.0, b=0.0)

    def max2(self, a, b, out=None) -> str:
        # max(a, b) = a + relu(b - a)
        d = self.emit("add", [b, self.neg(a)], self.shapes[a])
        r = self.emit("pwl", [d], self.shapes[a], table=self.table(RELU_REF, "relu"))
        return self.emit("add", [a, r], self.shapes[a], out=out)

    def max_tree(self, parts, out=None) -> str:
        while len(parts) > 1:
            nxt = []
            for i in range(0, len(parts) - 1, 2):
                last = len(parts) == 2
                nxt.append(self.max2(parts[i], parts[i + 1], out=out if last else None))
            if len(parts) % 2:
                nxt.append(parts[-1])
            parts = nxt
        return parts[0]


def _lower_node(bd: _Builder, node: ir.Node, xs: list) -> str:
    k, a, g = node.kind, node.attrs, bd.graph
    out_shape = bd.shapes[node.id]
    sx = bd.shapes[xs[0]]
    nid = node.id

    if k == "MatMul":
        return bd.emit("matmul", xs, out_shape, out=nid)
    if k == "Dense":
        w = bd.const("weight", g.param(node, "weight"), trainable=True)
        if g.param(node, "bias") is None:
            return bd.emit("matmul", [xs[0], w], out_shape, out=nid)
        y = bd.emit("matmul", [xs[0], w], out_shape)
        bias = bd.const("bias", g.param(node, "bias"), trainable=True)
        return bd.emit("add", [y, bias], out_shape, out=nid)
    if k == "Conv2d":
        wt = g.param(node, "weight")
        F = wt.shape[0]
        m = im2col(sx[1:], wt.shape[2:], int(a.get("stride", 1)), int(a.get("pad", 0)))
        batch = sx[0]
        ho, wo = m.out_hw
        cols = bd.emit("im2col", xs, (batch * ho * wo, m.index.shape[1]),
                       in_shape=list(m.in_shape), kernel=list(m.kernel), stride=m.stride, pad=m.pad)
        wmat = bd.const("weight", wt.reshape(F, -1).T, trainable=True)
        y = bd.emit("matmul", [cols, wmat], (batch * ho * wo, F))
        if g.param(node, "bias") is not None:
            y = bd.emit("add", [y, bd.const("bias", g.param(node, "bias"), trainable=True)], (batch * ho * wo, F))
        y = bd.emit("reshape", [y], (batch, ho, wo, F), shape=[-1, ho, wo, F])
        return bd.emit("transpose", [y], out_shape, out=nid, perm=[0, 3, 1, 2])
    if k == "AddBias":
        ax = int(a.get("axis", -1)) % len(sx)
        # trailing singleton axes let the bias broadcast along axis ``ax``
        vec = g.param(node, "bias")
        bias = bd.const("bias", vec.reshape((vec.size,) + (1,) * (len(sx) - 1 - ax)), trainable=True)
        return bd.emit("add", [xs[0], bias], out_shape, out=nid)
    if k == "ElemAdd":
        return bd.emit("add", xs, out_shape, out=nid)
    if k == "ElemMul":
        return bd.emit("mul", xs, out_shape, out=nid)
    if k == "ReLU":
        return bd.emit("pwl", xs, out_shape, out=nid, table=bd.table(RELU_REF, "relu"))
    if k in ("GELU", "Nonlinear"):
        fname = "gelu" if k == "GELU" else funcs.get(a["func"]).name
        return bd.emit("pwl", xs, out_shape, out=nid, table=bd.table(nid, fname))
    if k == "Transpose":
        return bd.emit("transpose", xs, out_shape, out=nid, perm=list(a["perm"]))
    if k == "Reshape":
        target = [int(d) for d in a["shape"]]
        # keep the batch axis polymorphic when the reshape preserves it
        if target and target[0] == sx[0] and -1 not in target[1:]:
            target = [-1] + target[1:]
        return bd.emit("reshape", xs, out_shape, out=nid, shape=target)
    if k == "AvgPool":
        win = int(a.get("window", 2))
        B, C, H, W = sx
        ho, wo = H // win, W // win
        P = np.zeros((H * W, ho * wo), dtype=np.float32)
        for i in range(ho * win):
            for j in range(wo * win):
                P[i * W + j, (i // win) * wo + (j // win)] = 1.0 / (win * win)
        flat = bd.emit("reshape", xs, (B * C, H * W), shape=[-1, H * W])
        y = bd.emit("matmul", [flat, bd.const("pool", P)], (B * C, ho * wo))
        return bd.emit("reshape", [y], out_shape, out=nid, shape=[-1, C, ho, wo])
    if k == "MaxPool":
        win = int(a.get("window", 2))
        parts = [bd.emit("gather", xs, out_shape, mode="window", window=win, offset=[i, j])
                 for i in range(win) for j in range(win)]
        return bd.max_tree(parts, out=nid)
    if k == "Softmax":
        rank = len(sx)
        ax = int(a.get("axis", -1)) % rank
        x = xs[0]
        perm = None
        if ax != rank - 1:
            perm = list(range(rank))
            perm[ax], perm[-1] = perm[-1], perm[ax]
            x = bd.emit("transpose", [x], tuple(sx[i] for i in perm), perm=perm)
        s = bd.shapes[x]
        C = s[-1]
        red = s[:-1] + (1,)
        cols = [bd.emit("gather", [x], red, mode="column", index=j) for j in range(C)]
        m = bd.max_tree(cols)
        shifted = bd.emit("add", [x, bd.neg(m)], s)
        e = bd.emit("pwl", [shifted], s, table=bd.table(f"{nid}/exp", "exp"))
        tot = bd.emit("matmul", [e, bd.const("ones", np.ones((C, 1)))], red)
        inv = bd.emit("pwl", [tot], red, table=bd.table(f"{nid}/reciprocal", "reciprocal"))
        if perm is None:
            return bd.emit("mul", [e, inv], s, out=nid)
        y = bd.emit("mul", [e, inv], s)
        return bd.emit("transpose", [y], out_shape, out=nid, perm=perm)
    if k == "LayerNorm":
        eps = float(a.get("eps", 1e-5))
        C = sx[-1]
        red = sx[:-1] + (1,)
        avg = bd.const("mean", np.full((C, 1), 1.0 / C))
        mean = bd.emit("matmul", [xs[0], avg], red)
        c = bd.emit("add", [xs[0], bd.neg(mean)], sx)
        sq = bd.emit("mul", [c, c], sx)
        var = bd.emit("matmul", [sq, avg], red)
        ve = bd.emit("affine", [var], red, a=1.0, b=eps)
        inv = bd.emit("pwl", [ve], red, table=bd.table(f"{nid}/rsqrt", "rsqrt"))
        gamma, beta = g.param(node, "gamma"), g.param(node, "beta")
        last = gamma is None and beta is None
        y = bd.emit("mul", [c, inv], sx, out=nid if last else None)
        if gamma is not None:
            y = bd.emit("mul", [y, bd.const("gamma", gamma, trainable=True)], sx, out=nid if beta is None else None)
        if beta is not None:
            y = bd.emit("add", [y, bd.const("beta", beta, trainable=True)], sx, out=nid)
        return y
    raise StructuralError(f"cannot lower node kind {k!r}", node=nid)


def lower_graph(graph: ir.Graph, tables: Optional[dict] = None, ranges=None) -> LoweredPlan:
    """Lower every node; ``ranges`` (a RangeReport) enables coverage warnings."""
    tables = dict(tables or {})
    shapes = ir.infer_shapes(graph)
    bd = _Builder(graph, tables, {n: s for n, s in graph.inputs})
    node_slots = {}
    for node in graph.topo_order():
        bd.node = node
        bd.shapes[node.id] = shapes[node.id]
        node_slots[node.id] = _lower_node(bd, node, list(node.inputs))
    warnings = []
    if ranges is not None:
        for key, t in bd.tables.items():
            if key == RELU_REF or key not in ranges.entries:
                continue
            lo, hi = ranges.entries[key].min, ranges.entries[key].max
            if lo < t.r_min or hi > t.r_max:
                msg = f"table {key!r} covers [{t.r_min:g}, {t.r_max:g}] but profiled range is [{lo:g}, {hi:g}]"
                warnings.append(msg)
                log.warning(msg)
    plan = LoweredPlan(
        inputs=list(graph.inputs),
        outputs={o: node_slots.get(o, o) for o in graph.outputs},
        prims=bd.prims,
        slots={k: tuple(v) for k, v in bd.shapes.items() if k not in bd.constants},
        constants=bd.constants,
        tables=bd.tables,
        trainable=bd.trainable,
        node_slots=node_slots,
        source=graph,
        warnings=warnings,
    )
    check_plan(plan)
    return plan


def check_plan(plan: LoweredPlan) -> None:
    """Closed primitive set, write-before-read, total provenance."""
    written = set(n for n, _ in plan.inputs) | set(plan.constants)
    for i, p in enumerate(plan.prims):
        if p.kind not in PRIMITIVE_KINDS:
            raise StructuralError(f"primitive {i} has kind {p.kind!r} outside the matrix set")
        if not p.source:
            raise StructuralError(f"primitive {i} ({p.kind}) has no source node")
        for s in p.inputs:
            if s not in written:
                raise StructuralError(f"primitive {i} ({p.kind}) reads {s!r} before it is written")
        if p.kind == "pwl" and p.attrs.get("table") not in plan.tables:
            raise StructuralError(f"primitive {i} uses unknown table {p.attrs.get('table')!r}")
        written.add(p.output)
    for o, s in plan.outputs.items():
        if s not in written:
            raise StructuralError(f"output {o!r} is never written")


# ---------------------------------------------------------------- execution

def _matmul(a, b, dtype):
    if dtype == np.float64:
        return np.matmul(a, b)
    if b.ndim == 2:
        lead = a.shape[:-1]
        y = kernels.matmul_f32(a.reshape(-1, a.shape[-1]), b)
        return y.reshape(lead + (b.shape[1],))
    lead = a.shape[:-2]
    a3 = a.reshape((-1,) + a.shape[-2:])
    b3 = b.reshape((-1,) + b.shape[-2:])
    y = np.stack([kernels.matmul_f32(a3[i], b3[i]) for i in range(a3.shape[0])])
    return y.reshape(lead + y.shape[1:])


def quantize_tensor(v, warn=None):
    """Symmetric per-tensor INT8: returns (int8 values, scale)."""
    m = float(np.max(np.abs(v))) if np.size(v) else 0.0
    if m == 0.0:
        if warn is not None:
            warn("all-zero tensor; INT8 scale falls back to 1.0")
        scale = 1.0
    else:
        scale = m / 127.0
    q = np.clip(np.rint(np.asarray(v, dtype=np.float64) / scale), -127, 127).astype(np.int8)
    return q, scale


def _matmul_int8(a, b, sa, sb):
    qa = np.clip(np.rint(np.asarray(a, dtype=np.float64) / sa), -127, 127).astype(np.int32)
    qb = np.clip(np.rint(np.asarray(b, dtype=np.float64) / sb), -127, 127).astype(np.int32)
    acc = np.matmul(qa, qb)
    return (acc.astype(np.float64) * (sa * sb)).astype(np.float32)


def run_primitive(plan: LoweredPlan, p: Primitive, args: list, dtype=np.float32, exact: bool = False):
    k = p.kind
    if k == "matmul":
        q = plan.quant
        if q is not None and dtype == np.float32:
            sa = q["scales"][p.inputs[0]]
            sb = q["scales"][p.inputs[1]]
            return _matmul_int8(args[0], args[1], sa, sb)
        return _matmul(args[0], args[1], dtype)
    if k == "add":
        return (args[0] + args[1]).astype(dtype, copy=False)
    if k == "mul":
        return (args[0] * args[1]).astype(dtype, copy=False)
    if k == "affine":
        return (dtype(p.attrs["a"]) * args[0] + dtype(p.attrs["b"])).astype(dtype, copy=False)
    if k == "pwl":
        t = plan.tables[p.attrs["table"]]
        x = args[0]
        if exact:
            f = pwl.exact(t)
            if f is None:
                raise ArgumentError(f"table {p.attrs['table']!r} has no exact function")
            return np.asarray(f(np.asarray(x, dtype=np.float64)), dtype=dtype).reshape(x.shape)
        if dtype == np.float64:
            return pwl.evaluate_batch(t, x)
        return kernels.pwl_eval_f32(t.breakpoints, t.k.astype(np.float32), t.b.astype(np.float32),
                                    x.ravel()).reshape(x.shape)
    if k == "im2col":
        m = im2col(p.attrs["in_shape"], p.attrs["kernel"], p.attrs["stride"], p.attrs["pad"])
        return m.apply(args[0])
    if k == "gather":
        x = args[0]
        if p.attrs["mode"] == "window":
            w = p.attrs["window"]
            di, dj = p.attrs["offset"]
            ho, wo = x.shape[2] // w, x.shape[3] // w
            return np.ascontiguousarray(x[:, :, di : di + ho * w : w, dj : dj + wo * w : w])
        j = p.attrs["index"]
        return np.ascontiguousarray(x[..., j : j + 1])
    if k == "transpose":
        return np.ascontiguousarray(np.transpose(args[0], p.attrs["perm"]))
    if k == "reshape":
        return args[0].reshape(tuple(p.attrs["shape"]))
    raise StructuralError(f"unknown primitive {k!r}")


def bind_inputs(plan: LoweredPlan, inputs: dict, dtype=np.float32) -> dict:
    env = {}
    for name, shape in plan.inputs:
        if name not in inputs:
            raise StructuralError(f"missing plan input {name!r}", edge=name)
        x = np.asarray(inputs[name], dtype=dtype)
        if x.ndim != len(shape) or x.shape[1:] != tuple(shape[1:]):
            raise StructuralError(f"input {name!r} has shape {x.shape}, plan expects {tuple(shape)} (any batch)",
                                  edge=name)
        env[name] = x
    for name, v in plan.constants.items():
        env[name] = v.astype(dtype, copy=False)
    return env


def execute_plan(plan: LoweredPlan, inputs: dict, dtype=np.float32, exact: bool = False,
                 keep_all: bool = False) -> dict:
    """Interpret the primitive sequence.

    ``dtype=np.float64`` runs in double precision (used for gradient checks);
    ``exact=True`` evaluates each table's source function instead of the
    table.
    """
    env = bind_inputs(plan, inputs, dtype)
    for p in plan.prims:
        try:
            env[p.output] = run_primitive(plan, p, [env[s] for s in p.inputs], dtype, exact)
        except ValueError as e:
            raise StructuralError(f"{p.kind} from node {p.source!r}: {e}", node=p.source,
                                  edge=list(p.inputs)) from None
    if keep_all:
        return env
    return {o: env[s] for o, s in plan.outputs.items()}


# ---------------------------------------------------------------- quantization

PWL_BITS = 16


def _fixed_point_table(t: pwl.PwlTable):
    m = max(float(np.max(np.abs(t.k))), float(np.max(np.abs(t.b))))
    lim = 2 ** (PWL_BITS - 1) - 1
    exp = 0 if m == 0.0 else int(math.floor(math.log2(lim / m)))
    kq = np.clip(np.rint(t.k * 2.0 ** exp), -lim, lim)
    bq = np.clip(np.rint(t.b * 2.0 ** exp), -lim, lim)
    return t.replace(k=kq / 2.0 ** exp, b=bq / 2.0 ** exp), exp


def quantize_plan(plan: LoweredPlan, calibration: dict) -> LoweredPlan:
    """INT8 symmetric per-tensor quantization of every matmul.

    Activation scales come from running the FP32 plan on ``calibration``;
    constant operands use their own max. PWL parameters drop to 16-bit fixed
    point with one shared exponent per table.
    """
    if plan.quant is not None:
        raise ArgumentError("plan is already quantized")
    if not calibration or any(np.size(v) == 0 for v in calibration.values()):
        raise ArgumentError("quantization needs calibration data")
    env = execute_plan(plan, calibration, keep_all=True)
    out = plan.copy()
    warnings = []
    scales = {}
    for p in plan.prims:
        if p.kind != "matmul":
            continue
        for s in p.inputs:
            if s not in scales:
                _, scales[s] = quantize_tensor(env[s], warn=lambda m, s=s: warnings.append(f"{s}: {m}"))
    for w in warnings:
        log.warning(w)
    exps = {}
    for ref, t in plan.tables.items():
        out.tables[ref], exps[ref] = _fixed_point_table(t)
    out.quant = {"scheme": "int8-symmetric-per-tensor", "pwl_bits": PWL_BITS,
                 "scales": scales, "pwl_exponents": exps}
    out.warnings = list(plan.warnings) + warnings
    return out


# ---------------------------------------------------------------- reports

@dataclass
class FidelityReport:
    outputs: dict          # name -> {max_abs, mean_abs, rel}
    nodes: dict            # node id -> max_abs at that node's output
    samples: int

    @property
    def max_abs(self) -> float:
        return max(v["max_abs"] for v in self.outputs.values())

    def rows(self):
        for name, v in self.outputs.items():
            yield {"scope": "output", "name": name, **v}
        for name, err in self.nodes.items():
            yield {"scope": "node", "name": name, "max_abs": err, "mean_abs": "", "rel": ""}


def _err(ref, got):
    d = np.abs(np.asarray(got, dtype=np.float64) - np.asarray(ref, dtype=np.float64))
    scale = float(np.max(np.abs(ref))) if np.size(ref) else 0.0
    mx = float(d.max()) if d.size else 0.0
    return {"max_abs": mx, "mean_abs": float(d.mean()) if d.size else 0.0, "rel": mx / scale if scale > 0 else mx}


def fidelity_report(graph: ir.Graph, plan: LoweredPlan, inputs: dict) -> FidelityReport:
    """Compare plan and reference executors on a batch of inputs."""
    if not inputs or any(np.shape(v)[0] == 0 for v in inputs.values()):
        raise ArgumentError("fidelity needs a non-empty input set")
    ref = ir.execute_reference(graph, inputs, keep_all=True)
    got = execute_plan(plan, inputs, keep_all=True)
    outputs = {o: _err(ref[o], got[plan.outputs[o]]) for o in graph.outputs}
    nodes = {nid: _err(ref[nid], got[slot])["max_abs"] for nid, slot in plan.node_slots.items()
             if slot in got and np.shape(ref[nid]) == np.shape(got[slot])}
    return FidelityReport(outputs, nodes, int(next(iter(inputs.values())).shape[0]))


@dataclass
class ParamAccounting:
    tables: dict            # ref -> bytes
    total_bytes: int
    model_bytes: int
    bytes_per_param: int

    @property
    def ratio(self) -> float:
        return self.total_bytes / self.model_bytes if self.model_bytes else 0.0


def extra_parameter_bytes(plan: LoweredPlan, int8: Optional[bool] = None) -> ParamAccounting:
    """Storage of PWL tables: segments x 2 params x (4 bytes FP32 | 2 bytes INT8 mode).

    ``ratio`` divides by the model's own weight bytes at the same precision
    (4 bytes FP32, 1 byte INT8).
    """
    if int8 is None:
        int8 = plan.quant is not None
    per = 2 if int8 else 4
    tables = {ref: t.n * 2 * per for ref, t in sorted(plan.tables.items())}
    model = sum(plan.constants[c].size for c in plan.trainable) * (1 if int8 else 4)
    return ParamAccounting(tables, int(sum(tables.values())), int(model), per)


# ---------------------------------------------------------------- (de)serialization

def plan_to_dict(plan: LoweredPlan, weights_file: Optional[str] = None) -> dict:
    d = {
        "format": FORMAT,
        "inputs": [{"name": n, "shape": list(s)} for n, s in plan.inputs],
        "outputs": dict(plan.outputs),
        "primitives": [{"kind": p.kind, "inputs": p.inputs, "output": p.output, "attrs": p.attrs, "source": p.source}
                       for p in plan.prims],
        "slots": {k: list(v) for k, v in plan.slots.items()},
        "constants": {k: list(v.shape) for k, v in plan.constants.items()},
        "trainable": list(plan.trainable),
        "tables": {k: pwl.to_dict(t) for k, t in plan.tables.items()},
        "node_slots": dict(plan.node_slots),
        "quant": plan.quant,
        "source_graph": None if plan.source is None else ir.graph_to_dict(plan.source),
    }
    if weights_file is not None:
        d["weights"] = weights_file
    return d


def plan_from_dict(d: dict, tensors: dict) -> LoweredPlan:
    try:
        source = None
        if d.get("source_graph"):
            gw = {k[len("graph/"):]: v for k, v in tensors.items() if k.startswith("graph/")}
            source = ir.graph_from_dict(d["source_graph"], gw)
        constants = {k: tensors[k] for k in d["constants"]}
        plan = LoweredPlan(
            inputs=[(i["name"], tuple(i["shape"])) for i in d["inputs"]],
            outputs=dict(d["outputs"]),
            prims=[Primitive(p["kind"], list(p["inputs"]), p["output"], dict(p["attrs"]), p["source"])
                   for p in d["primitives"]],
            slots={k: tuple(v) for k, v in d["slots"].items()},
            constants=constants,
            tables={k: pwl.from_dict(t) for k, t in d["tables"].items()},
            trainable=list(d.get("trainable", [])),
            node_slots=dict(d.get("node_slots", {})),
            quant=d.get("quant"),
            source=source,
        )
    except KeyError as e:
        raise ArgumentError(f"malformed plan: missing {e}") from None
    check_plan(plan)
    return plan


def plan_tensors(plan: LoweredPlan) -> dict:
    t = dict(plan.constants)
    if plan.source is not None:
        t.update({f"graph/{k}": v for k, v in plan.source.weights.items()})
    return t


def save_plan(plan: LoweredPlan, path) -> None:
    path = os.fspath(path)
    wname = os.path.splitext(os.path.basename(path))[0] + ".nmwt"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan_to_dict(plan, wname), fh, indent=1, sort_keys=True)
        fh.write("\n")
    weightfile.save(plan_tensors(plan), os.path.join(os.path.dirname(path), wname))


def load_plan(path) -> LoweredPlan:
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    tensors = weightfile.load(os.path.join(os.path.dirname(path), d.get("weights", "")))\
        if d.get("weights") else {}
    return plan_from_dict(d, tensors)


def build_tables(report, segments: Optional[int] = None, config: Optional[pwl.ElasticConfig] = None,
                 correct: bool = True, keys=None) -> dict:
    """Tables for every approximated key in a RangeReport, over padded ranges.

    ``segments`` gives equal-width tables; ``config`` gives elastic ones.
    """
    if (segments is None) == (config is None):
        raise ArgumentError("give exactly one of segments or config")
    out = {}
    for key, entry in sorted(report.entries.items()):
        if keys is not None and key not in keys:
            continue
        if "/" not in key and entry.function in ("exp", "relu", ""):
            continue  # softmax/LayerNorm inputs and ReLUs need no table of their own
        rng = entry.padded()
        if config is not None:
            out[key] = pwl.build_elastic(entry.function, rng, config)
        else:
            t = pwl.fit_uniform(entry.function, rng, segments)
            out[key] = pwl.vertical_bias_correction(entry.function, t) if correct else t
    return out
