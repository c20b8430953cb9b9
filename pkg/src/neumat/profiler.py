"""Calibration-driven input ranges for every nonlinear operator."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ir
from .errors import ArgumentError, StructuralError

FORMAT = "neumat.ranges/1"
PAD_FRACTION = 0.01


def thread_count() -> int:
    env = os.environ.get("NEUMAT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ArgumentError(f"NEUMAT_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


@dataclass
class RangeEntry:
    min: float
    max: float
    count: int
    function: str = ""

    def padded(self, fraction: float = PAD_FRACTION) -> tuple:
        lo, hi = self.min, self.max
        w = hi - lo
        if w == 0:
            w = max(abs(lo), 1.0) * 1e-3
        plo, phi = lo - fraction * w, hi + fraction * w
        if lo > 0 >= plo:
            # stay clear of the pole of reciprocal/rsqrt
            plo = 0.5 * lo
        return plo, phi


@dataclass
class RangeReport:
    policy: str
    entries: dict = field(default_factory=dict)

    def padded(self, key: str) -> tuple:
        return self.entries[key].padded()

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "policy": self.policy,
            "padding": PAD_FRACTION,
            "entries": {
                k: {"min": repr(e.min), "max": repr(e.max), "count": e.count, "function": e.function}
                for k, e in sorted(self.entries.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RangeReport":
        try:
            entries = {k: RangeEntry(float(v["min"]), float(v["max"]), int(v["count"]), v.get("function", ""))
                       for k, v in d["entries"].items()}
            return cls(d["policy"], entries)
        except (KeyError, TypeError, ValueError) as e:
            raise ArgumentError(f"malformed range report: {e}") from None

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RangeReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def parse_policy(policy) -> tuple:
    """'minmax' -> ('minmax', None); 'percentile:1' or ('percentile', 1) -> ('percentile', 1.0)."""
    if isinstance(policy, tuple):
        name, p = policy
    else:
        name, _, p = str(policy).partition(":")
        p = p or None
    if name == "minmax":
        return "minmax", None
    if name == "percentile":
        p = float(p if p is not None else 1.0)
        if not 0 <= p < 50:
            raise ArgumentError(f"percentile must be in [0, 50), got {p}")
        return "percentile", p
    raise ArgumentError(f"unknown clip policy {policy!r}")


def operator_values(graph: ir.Graph, env: dict) -> dict:
    """Key -> (function, values) for every nonlinear input seen in one run.

    Softmax is observed after row-max subtraction; its reciprocal sees row
    sums of the exponentials; LayerNorm's rsqrt sees ``variance + eps``.
    """
    out = {}
    for n in graph.nodes:
        if n.kind not in ir.APPROX_KINDS and n.kind not in ir.EXACT_PWL_KINDS:
            continue
        x = np.asarray(env[n.inputs[0]], dtype=np.float64)
        if n.kind in ("ReLU", "MaxPool"):
            out[n.id] = ("relu", x)
        elif n.kind == "GELU":
            out[n.id] = ("gelu", x)
        elif n.kind == "Nonlinear":
            out[n.id] = (n.attrs["func"], x)
        elif n.kind == "Softmax":
            ax = int(n.attrs.get("axis", -1))
            s = x - x.max(axis=ax, keepdims=True)
            out[n.id] = ("exp", s)
            out[f"{n.id}/exp"] = ("exp", s)
            out[f"{n.id}/reciprocal"] = ("reciprocal", np.exp(s).sum(axis=ax, keepdims=True))
        elif n.kind == "LayerNorm":
            eps = float(n.attrs.get("eps", 1e-5))
            mu = x.mean(axis=-1, keepdims=True)
            out[n.id] = ("", x)
            out[f"{n.id}/rsqrt"] = ("rsqrt", ((x - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    return out


def _observe(graph, batch):
    env = ir.execute_reference(graph, batch, keep_all=True)
    return operator_values(graph, env)


def profile_ranges(graph: ir.Graph, calibration, policy="minmax") -> RangeReport:
    """Record each nonlinear operator's input range over the calibration batches."""
    diags = ir.validate_graph(graph)
    if diags:
        raise StructuralError("graph does not validate: " + "; ".join(map(str, diags)))
    kind, p = parse_policy(policy)
    batches = list(calibration)
    if not batches:
        raise ArgumentError("calibration set is empty")
    with ThreadPoolExecutor(max_workers=min(thread_count(), len(batches))) as pool:
        observed = list(pool.map(lambda b: _observe(graph, b), batches))

    keys = list(observed[0])
    label = "minmax" if kind == "minmax" else f"percentile:{p:g}"
    report = RangeReport(label)
    for key in keys:
        fname = observed[0][key][0]
        vals = [obs[key][1].ravel() for obs in observed if obs[key][1].size]
        count = int(sum(v.size for v in vals))
        if count == 0:
            raise StructuralError(f"nonlinear node {key!r} was not reached by any calibration sample", node=key)
        if kind == "minmax":
            lo = min(float(v.min()) for v in vals)
            hi = max(float(v.max()) for v in vals)
        else:
            allv = np.concatenate(vals)
            lo, hi = (float(q) for q in np.percentile(allv, [p, 100.0 - p]))
        report.entries[key] = RangeEntry(lo, hi, count, fname)
    return report
