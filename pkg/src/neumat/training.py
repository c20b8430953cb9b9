"""Fine-tuning through lowered plans, with table slopes as the nonlinearity gradients."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ir, lowering, profiler, pwl
from .errors import ArgumentError, NumericalError, StructuralError

TRAINABLE_KINDS = frozenset({"matmul", "add", "mul", "affine", "pwl", "im2col", "gather", "transpose", "reshape"})


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    acc_th: float = 0.01
    momentum: float = 0.0

    def __post_init__(self):
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ArgumentError(f"lr must be >= 0, got {self.lr}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ArgumentError(f"epochs must be an integer >= 1, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ArgumentError(f"batch_size must be an integer >= 1, got {self.batch_size}")
        if not self.acc_th >= 0:
            raise ArgumentError(f"acc_th must be >= 0, got {self.acc_th}")
        if not 0 <= self.momentum < 1:
            raise ArgumentError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        if set(d) - known:
            raise ArgumentError(f"unknown train config keys: {sorted(set(d) - known)}")
        return cls(**d)


def pwl_gradient(table: pwl.PwlTable, x):
    """Slope of the segment holding ``x``; scalars in, scalar out."""
    g = pwl.slope_at(table, x)
    return float(g) if np.ndim(x) == 0 else g


# ---------------------------------------------------------------- reverse mode

def _unbroadcast(g, shape):
    shape = tuple(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _vjp(plan, p, args, out, g, exact):
    """Input cotangents of one primitive (None for integer-only paths)."""
    k = p.kind
    if k == "matmul":
        a, b = args
        if b.ndim == 2:
            a2 = a.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            return [(g2 @ b.T).reshape(a.shape), a2.T @ g2]
        return [g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g]
    if k == "add":
        return [_unbroadcast(g, args[0].shape), _unbroadcast(g, args[1].shape)]
    if k == "mul":
        return [_unbroadcast(g * args[1], args[0].shape), _unbroadcast(g * args[0], args[1].shape)]
    if k == "affine":
        return [g * p.attrs["a"]]
    if k == "pwl":
        t = plan.tables[p.attrs["table"]]
        if exact:
            f = pwl.exact(t)
            return [g * f.derivative(args[0])]
        return [g * pwl.slope_at(t, args[0])]
    if k == "im2col":
        m = lowering.im2col(p.attrs["in_shape"], p.attrs["kernel"], p.attrs["stride"], p.attrs["pad"])
        return [m.apply_transpose(g, args[0].shape[0])]
    if k == "gather":
        x = args[0]
        gx = np.zeros_like(x)
        if p.attrs["mode"] == "window":
            w = p.attrs["window"]
            di, dj = p.attrs["offset"]
            ho, wo = x.shape[2] // w, x.shape[3] // w
            gx[:, :, di : di + ho * w : w, dj : dj + wo * w : w] = g
        else:
            j = p.attrs["index"]
            gx[..., j : j + 1] = g
        return [gx]
    if k == "transpose":
        return [np.transpose(g, np.argsort(p.attrs["perm"]))]
    if k == "reshape":
        return [g.reshape(args[0].shape)]
    raise StructuralError(f"no gradient for primitive {k!r}", node=p.source, primitive=k)


def check_trainable(plan: lowering.LoweredPlan) -> None:
    if plan.quant is not None:
        raise ArgumentError("cannot fine-tune an INT8 plan; fine-tune the FP32 plan and quantize afterwards")
    for p in plan.prims:
        if p.kind not in TRAINABLE_KINDS:
            raise StructuralError(f"unsupported primitive {p.kind!r} from node {p.source!r}", node=p.source)


def softmax_xent(logits, y):
    """Mean cross-entropy of integer labels and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return loss, g / n


def loss_and_grads(plan, x, y, params: Optional[dict] = None, exact: bool = False):
    """Cross-entropy on the plan's single output and gradients for every trainable constant.

    Runs in float64. ``params`` overrides constants (name -> float64 array).
    """
    if len(plan.inputs) != 1 or len(plan.outputs) != 1:
        raise ArgumentError("training needs a plan with exactly one input and one output")
    name = plan.inputs[0][0]
    env = lowering.bind_inputs(plan, {name: x}, np.float64)
    if params:
        env.update(params)
    for p in plan.prims:
        env[p.output] = lowering.run_primitive(plan, p, [env[s] for s in p.inputs], np.float64, exact)
    out_slot = next(iter(plan.outputs.values()))
    logits = env[out_slot]
    if logits.ndim != 2:
        raise ArgumentError(f"classifier output must be (batch, classes), got {logits.shape}")
    loss, g = softmax_xent(logits, np.asarray(y))
    cot = {out_slot: g}
    for p in reversed(plan.prims):
        gout = cot.pop(p.output, None)
        if gout is None:
            continue
        args = [env[s] for s in p.inputs]
        for s, gi in zip(p.inputs, _vjp(plan, p, args, env[p.output], gout, exact)):
            cot[s] = cot[s] + gi if s in cot else gi
    grads = {t: cot.get(t, np.zeros_like(env[t])) for t in plan.trainable}
    return loss, grads, logits


def predict(plan, x, exact: bool = False, dtype=np.float32):
    name = plan.inputs[0][0]
    out = lowering.execute_plan(plan, {name: x}, dtype=dtype, exact=exact)
    return next(iter(out.values()))


def accuracy(logits, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        raise ArgumentError("empty dataset")
    return float(np.mean(np.argmax(logits, axis=1) == y))


@dataclass
class History:
    rows: list = field(default_factory=list)   # (epoch, loss, train_acc, eval_acc)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc", "eval_acc"])
        for e, loss, tr, ev in self.rows:
            w.writerow([e, repr(loss), repr(tr), "" if ev is None else repr(ev)])
        return buf.getvalue()


def finetune(plan: lowering.LoweredPlan, X, y, cfg: TrainConfig = TrainConfig(), exact: bool = False,
             eval_data=None):
    """Mini-batch SGD on the plan's trainable constants; tables stay frozen.

    ``exact=True`` swaps every table for its source function in both passes,
    which trains the unapproximated network under identical conditions.
    Returns ``(new_plan, History)``.
    """
    check_trainable(plan)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0 or X.shape[0] != y.shape[0]:
        raise ArgumentError(f"dataset needs matching non-empty features and labels, got {X.shape[0]} and {y.shape[0]}")
    out = plan.copy()
    params = {t: out.constants[t].astype(np.float64) for t in out.trainable}
    vel = {t: np.zeros_like(v) for t, v in params.items()}
    rng = np.random.default_rng(cfg.seed)
    hist = History()
    n = X.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            loss, grads, _ = loss_and_grads(out, X[idx], y[idx], params, exact)
            if not math.isfinite(loss):
                raise NumericalError(f"loss diverged at epoch {epoch}", epoch=epoch, loss=repr(loss))
            total += loss * idx.size
            if cfg.lr == 0:
                continue
            for t, gt in grads.items():
                vel[t] = cfg.momentum * vel[t] + gt
                params[t] = params[t] - cfg.lr * vel[t]
        if cfg.lr != 0:
            for t in out.trainable:
                out.constants[t] = params[t].astype(np.float32)
        train_acc = accuracy(predict(out, X, exact), y)
        eval_acc = None
        if eval_data is not None:
            eval_acc = accuracy(predict(out, eval_data[0], exact), eval_data[1])
        hist.rows.append((epoch, total / n, train_acc, eval_acc))
    return out, hist


def graph_with_plan_weights(graph: ir.Graph, plan: lowering.LoweredPlan) -> ir.Graph:
    """Copy trained Dense/Conv2d/bias constants back into graph weights."""
    w = dict(graph.weights)
    for node in graph.nodes:
        for role, wname in node.params.items():
            cname = f"const:{node.id}.{role}"
            if cname not in plan.constants:
                continue
            v = plan.constants[cname]
            w[wname] = v.T.reshape(graph.weights[wname].shape) if node.kind == "Conv2d" and role == "weight" \
                else v.reshape(graph.weights[wname].shape)
    return ir.Graph(list(graph.inputs), list(graph.nodes), list(graph.outputs), w)


@dataclass(frozen=True)
class Gap:
    reference_acc: float
    plan_acc: float
    acc_loss: float
    retrain: bool


def accuracy_gap(graph: ir.Graph, plan: lowering.LoweredPlan, X, y, acc_th: float = 0.01) -> Gap:
    """Accuracy lost by the approximated plan against the exact graph."""
    y = np.asarray(y)
    if y.size == 0 or np.asarray(X).shape[0] == 0:
        raise ArgumentError("empty evaluation dataset")
    name = graph.inputs[0][0]
    ref = next(iter(ir.execute_reference(graph, {name: np.asarray(X, np.float32)}).values()))
    a_ref = accuracy(ref, y)
    a_plan = accuracy(predict(plan, X), y)
    loss = a_ref - a_plan
    return Gap(a_ref, a_plan, loss, loss > acc_th)


@dataclass
class PipelineResult:
    plan: lowering.LoweredPlan
    gap: Gap
    retrained: bool
    history: Optional[History]
    final_gap: Gap


def approximate_and_finetune(graph: ir.Graph, calibration, X, y, cfg: TrainConfig = TrainConfig(),
                             segments: Optional[int] = None, config: Optional[pwl.ElasticConfig] = None,
                             eval_data=None) -> PipelineResult:
    """Profile, approximate, lower, and fine-tune only when the accuracy loss exceeds ``cfg.acc_th``."""
    report = profiler.profile_ranges(graph, calibration)
    tables = lowering.build_tables(report, segments=segments, config=config)
    plan = lowering.lower_graph(graph, tables, report)
    ex, ey = eval_data if eval_data is not None else (X, y)
    gap = accuracy_gap(graph, plan, ex, ey, cfg.acc_th)
    if not gap.retrain:
        return PipelineResult(plan, gap, False, None, gap)
    tuned, hist = finetune(plan, X, y, cfg, eval_data=eval_data)
    after = accuracy_gap(graph, tuned, ex, ey, cfg.acc_th)
    return PipelineResult(tuned, gap, True, hist, after)
