"""Batch command line: profile -> approximate -> lower -> run / simulate / search / train / report.

Exit codes: 0 success, 1 usage, 2 validation or domain error, 3 numerical
error. Failures print one JSON line ``{"code", "message", "context"}`` to
stderr. Every command writes ``<output>.manifest.json`` next to its main
output with content hashes of inputs and outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys

import numpy as np

from . import __version__, gemmsim, ir, lowering, profiler, pwl, training
from . import weights as weightfile
from .errors import ArgumentError, NeumatError

FORMATS = (ir.FORMAT, pwl.FORMAT, profiler.FORMAT, lowering.FORMAT, "neumat.tableset/1",
           "neumat.blocking/1", "NMWT/1")
TABLESET = "neumat.tableset/1"
DEFAULT_ACCEL = os.path.join(os.path.dirname(__file__), "data", "accel_default.json")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- file helpers

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_text(path, text: str) -> None:
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def write_json(path, obj) -> None:
    write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_manifest(primary, command: str, inputs, outputs, config: dict) -> str:
    """Record what produced ``primary``; contains no timestamps so reruns are byte-identical."""
    path = os.fspath(primary) + ".manifest.json"
    write_json(path, {
        "command": command,
        "tool": {"name": "neumat", "version": __version__},
        "inputs": [{"path": os.fspath(p), "sha256": sha256(p)} for p in inputs],
        "outputs": [{"path": os.fspath(p), "sha256": sha256(p)} for p in outputs],
        "config": config,
    })
    return path


def read_csv_dataset(path):
    """Rows ``label, f_1..f_d`` (an optional non-numeric header row is skipped)."""
    labels, feats = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError:
                if i == 0:
                    continue
                raise ArgumentError(f"{path}:{i + 1}: non-numeric field", path=os.fspath(path), line=i + 1) from None
            if len(vals) < 2:
                raise ArgumentError(f"{path}:{i + 1}: need a label and at least one feature", line=i + 1)
            labels.append(vals[0])
            feats.append(vals[1:])
    if not feats:
        raise ArgumentError(f"dataset {path} is empty", path=os.fspath(path))
    if len({len(f) for f in feats}) != 1:
        raise ArgumentError(f"dataset {path} has ragged rows", path=os.fspath(path))
    y = np.asarray(labels)
    if np.any(y != np.rint(y)):
        raise ArgumentError("labels must be integers", path=os.fspath(path))
    return np.asarray(feats, dtype=np.float32), y.astype(np.int64)


def read_dataset(path, input_name="x"):
    """(features, labels or None) from a CSV or an NMWT file (tensors ``input_name`` / ``labels``)."""
    if os.fspath(path).endswith(".csv"):
        return read_csv_dataset(path)
    t = weightfile.load(path)
    if input_name in t:
        x = t[input_name]
    elif len([k for k in t if k != "labels"]) == 1:
        x = next(v for k, v in t.items() if k != "labels")
    else:
        raise ArgumentError(f"{path}: no tensor named {input_name!r}", path=os.fspath(path), tensors=sorted(t))
    y = t.get("labels")
    return x, (None if y is None else np.rint(y).astype(np.int64))


def sample_batches(x, shape, batch_size):
    """Split data into executor inputs: one entry per sample when ``x`` has an extra leading axis."""
    if x.ndim == len(shape) + 1:
        return [x[i] for i in range(x.shape[0])]
    if x.ndim != len(shape):
        raise ArgumentError(f"data of shape {x.shape} does not match graph input {tuple(shape)}")
    return [x[i : i + batch_size] for i in range(0, x.shape[0], batch_size)]


def table_filename(key: str) -> str:
    return key.replace("/", "--") + ".json"


def save_tableset(tables: dict, out_dir) -> list:
    os.makedirs(out_dir, exist_ok=True)
    index = {k: table_filename(k) for k in sorted(tables)}
    paths = []
    for k, fname in index.items():
        p = os.path.join(out_dir, fname)
        pwl.save(tables[k], p)
        paths.append(p)
    idx = os.path.join(out_dir, "tables.json")
    write_json(idx, {"format": TABLESET, "tables": index})
    return [idx] + paths


def load_tableset(path) -> tuple:
    """Tables keyed by node from a directory (with ``tables.json``) or a single table file keyed by name."""
    if os.path.isdir(path):
        idx = os.path.join(path, "tables.json")
        if not os.path.exists(idx):
            raise ArgumentError(f"{path} has no tables.json index", path=os.fspath(path))
        with open(idx, encoding="utf-8") as fh:
            index = json.load(fh)["tables"]
        files = [idx] + [os.path.join(path, f) for f in index.values()]
        return {k: pwl.load(os.path.join(path, f)) for k, f in index.items()}, files
    raise ArgumentError(f"{path} is not a table directory", path=os.fspath(path))


def load_accel(path) -> gemmsim.AcceleratorConfig:
    return gemmsim.AcceleratorConfig.load(path or DEFAULT_ACCEL)


def _csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------- commands

def cmd_profile(a):
    g = ir.load_graph(a.graph)
    name, shape = g.inputs[0]
    x, _ = read_dataset(a.data, name)
    batches = [{name: b} for b in sample_batches(x, shape, a.batch_size)]
    rep = profiler.profile_ranges(g, batches, a.policy)
    rep.save(a.out)
    write_manifest(a.out, "profile", [a.graph, a.data], [a.out],
                   {"policy": rep.policy, "batch_size": a.batch_size})


def _elastic(a):
    return pwl.ElasticConfig(a.dlx, a.dly, a.eth)


def cmd_approximate(a):
    if a.from_ranges:
        if not a.out_dir:
            raise UsageError("approximate --from-ranges needs --out-dir")
        rep = profiler.RangeReport.load(a.from_ranges)
        cfg = None if a.segments else _elastic(a)
        tables = lowering.build_tables(rep, segments=a.segments, config=cfg, correct=not a.no_correct)
        outs = save_tableset(tables, a.out_dir)
        write_manifest(outs[0], "approximate", [a.from_ranges], outs,
                       {"segments": a.segments, "dlx": a.dlx, "dly": a.dly, "eth": a.eth,
                        "corrected": not a.no_correct})
        return
    if not (a.func and a.range and a.out):
        raise UsageError("approximate needs --func, --range and --out (or --from-ranges)")
    if a.segments:
        t = pwl.fit_uniform(a.func, a.range, a.segments)
        if not a.no_correct:
            t = pwl.vertical_bias_correction(a.func, t, a.eth)
    else:
        t = pwl.build_elastic(a.func, a.range, _elastic(a))
    pwl.save(t, a.out)
    write_manifest(a.out, "approximate", [], [a.out],
                   {"func": a.func, "range": [repr(v) for v in a.range], "segments": a.segments,
                    "dlx": a.dlx, "dly": a.dly, "eth": a.eth, "corrected": not a.no_correct})


def cmd_lower(a):
    g = ir.load_graph(a.graph)
    tables, tfiles = load_tableset(a.tables) if a.tables else ({}, [])
    ranges = profiler.RangeReport.load(a.ranges) if a.ranges else None
    plan = lowering.lower_graph(g, tables, ranges)
    inputs = [a.graph] + tfiles + ([a.ranges] if a.ranges else [])
    if a.int8:
        if not a.calib:
            raise UsageError("lower --int8 needs --calib")
        name, shape = g.inputs[0]
        x, _ = read_dataset(a.calib, name)
        if x.ndim == len(shape) + 1:
            x = x.reshape((-1,) + tuple(x.shape[2:]))
        plan = lowering.quantize_plan(plan, {name: x})
        inputs.append(a.calib)
    for w in plan.warnings:
        print(f"warning: {w}", file=sys.stderr)
    lowering.save_plan(plan, a.out)
    wfile = os.path.join(os.path.dirname(a.out), os.path.splitext(os.path.basename(a.out))[0] + ".nmwt")
    write_manifest(a.out, "lower", inputs, [a.out, wfile], {"int8": bool(a.int8)})


def cmd_run(a):
    plan = lowering.load_plan(a.plan)
    name, shape = plan.inputs[0]
    x, _ = read_dataset(a.input, name)
    samples = sample_batches(x, shape, max(1, x.shape[0])) if x.ndim == len(shape) + 1 else [x]
    outs = [lowering.execute_plan(plan, {name: s}) for s in samples]
    result = {k: np.stack([o[k] for o in outs]) if len(outs) > 1 else outs[0][k] for k in outs[0]}
    weightfile.save(result, a.out)
    written = [a.out]
    if plan.source is not None:
        reps = [lowering.fidelity_report(plan.source, plan, {name: s}) for s in samples]
        rows = []
        for key in reps[0].outputs:
            rows.append({"scope": "output", "name": key,
                         "max_abs": max(r.outputs[key]["max_abs"] for r in reps),
                         "mean_abs": float(np.mean([r.outputs[key]["mean_abs"] for r in reps])),
                         "rel": max(r.outputs[key]["rel"] for r in reps)})
        for key in reps[0].nodes:
            rows.append({"scope": "node", "name": key, "max_abs": max(r.nodes[key] for r in reps),
                         "mean_abs": "", "rel": ""})
        write_text(a.fidelity, _csv(rows, ("scope", "name", "max_abs", "mean_abs", "rel")))
        written.append(a.fidelity)
    write_manifest(a.out, "run", [a.plan, a.input], written, {"samples": len(samples)})


def cmd_simulate(a):
    plan = lowering.load_plan(a.plan)
    acc = load_accel(a.accel)
    cost = gemmsim.simulate_plan(plan, acc, a.energy_budget)
    write_text(a.out, gemmsim.plan_cost_csv(cost))
    write_manifest(a.out, "simulate", [a.plan, a.accel or DEFAULT_ACCEL], [a.out],
                   {"energy_budget": a.energy_budget})


def cmd_search(a):
    acc = load_accel(a.accel)
    df, rep = gemmsim.search_blocking(a.m, a.k, a.n, acc, a.energy_budget)
    write_json(a.out, gemmsim.blocking_to_dict(a.m, a.k, a.n, df, rep, acc))
    write_manifest(a.out, "search", [a.accel or DEFAULT_ACCEL], [a.out],
                   {"m": a.m, "k": a.k, "n": a.n, "energy_budget": a.energy_budget})


def cmd_train(a):
    plan = lowering.load_plan(a.plan)
    with open(a.config, encoding="utf-8") as fh:
        cfg = training.TrainConfig.from_dict(json.load(fh))
    name = plan.inputs[0][0]
    X, y = read_dataset(a.data, name)
    if y is None:
        raise ArgumentError(f"dataset {a.data} has no labels", path=os.fspath(a.data))
    ev = None
    inputs = [a.plan, a.config, a.data]
    if a.eval_data:
        ev = read_dataset(a.eval_data, name)
        inputs.append(a.eval_data)
    tuned, hist = training.finetune(plan, X, y, cfg, exact=a.exact, eval_data=ev)
    lowering.save_plan(tuned, a.out)
    wfile = os.path.join(os.path.dirname(a.out), os.path.splitext(os.path.basename(a.out))[0] + ".nmwt")
    write_text(a.metrics, hist.to_csv())
    write_manifest(a.out, "train", inputs, [a.out, wfile, a.metrics],
                   {k: getattr(cfg, k) for k in cfg.__dataclass_fields__} | {"exact": bool(a.exact)})


REPORT_FIELDS = ("plan", "tables", "segments", "extra_bytes_fp32", "extra_bytes_int8", "model_bytes",
                 "overhead_ratio", "latency_s", "energy_j", "ops_per_joule", "max_abs")


def cmd_report(a):
    acc = load_accel(a.accel)
    x = None
    inputs = list(a.inputs) + [a.accel or DEFAULT_ACCEL]
    if a.data:
        inputs.append(a.data)
    rows = []
    for path in a.inputs:
        plan = lowering.load_plan(path)
        fp = lowering.extra_parameter_bytes(plan, int8=False)
        i8 = lowering.extra_parameter_bytes(plan, int8=True)
        mine = lowering.extra_parameter_bytes(plan)
        cost = gemmsim.simulate_plan(plan, acc)
        err = ""
        if a.data and plan.source is not None:
            name, shape = plan.inputs[0]
            x, _ = read_dataset(a.data, name)
            samples = sample_batches(x, shape, max(1, x.shape[0])) if x.ndim == len(shape) + 1 else [x]
            err = max(lowering.fidelity_report(plan.source, plan, {name: s}).max_abs for s in samples)
        rows.append({
            "plan": os.fspath(path), "tables": len(plan.tables),
            "segments": sum(t.n for t in plan.tables.values()),
            "extra_bytes_fp32": fp.total_bytes, "extra_bytes_int8": i8.total_bytes,
            "model_bytes": mine.model_bytes, "overhead_ratio": mine.ratio,
            "latency_s": cost.total.total_latency_s, "energy_j": cost.total.energy_j,
            "ops_per_joule": gemmsim.throughput_per_watt(cost.total, cost.ops), "max_abs": err,
        })
    write_text(a.out, _csv(rows, REPORT_FIELDS))
    write_manifest(a.out, "report", inputs, [a.out], {})


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neumat", description="Piecewise-linear approximation, lowering and accelerator cost modelling.")
    p.add_argument("--version", action="version",
                   version=f"neumat {__version__} (formats: {', '.join(FORMATS)})")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("profile", help="record nonlinear-operator input ranges over calibration data")
    s.add_argument("--graph", required=True, help="graph JSON")
    s.add_argument("--data", required=True, help="calibration data (CSV or NMWT)")
    s.add_argument("--policy", default="minmax", help="'minmax' or 'percentile:P' (default minmax)")
    s.add_argument("--batch-size", type=int, default=32, help="rows per calibration batch (default 32)")
    s.add_argument("--out", required=True, help="output ranges JSON")
    s.set_defaults(fn=cmd_profile)

    s = sub.add_parser("approximate", help="build a PWL table, or one per profiled operator")
    s.add_argument("--func", help="function name (exp, gelu, reciprocal, rsqrt, ...)")
    s.add_argument("--range", nargs=2, type=float, metavar=("A", "B"), help="approximation interval")
    s.add_argument("--dlx", type=float, default=0.5, help="horizontal step bound (default 0.5)")
    s.add_argument("--dly", type=float, default=0.1, help="vertical change bound (default 0.1)")
    s.add_argument("--eth", type=float, default=0.0, help="bias-correction threshold (default 0)")
    s.add_argument("--segments", type=int, help="equal-width table with this many segments instead of elastic sizing")
    s.add_argument("--no-correct", action="store_true", help="skip bias correction of equal-width tables")
    s.add_argument("--from-ranges", help="ranges JSON from 'profile'; builds every table of the graph")
    s.add_argument("--out", help="output table JSON (single function)")
    s.add_argument("--out-dir", help="output table directory (with --from-ranges)")
    s.set_defaults(fn=cmd_approximate)

    s = sub.add_parser("lower", help="lower a graph to the primitive plan")
    s.add_argument("--graph", required=True, help="graph JSON")
    s.add_argument("--tables", help="table directory from 'approximate --from-ranges'")
    s.add_argument("--ranges", help="ranges JSON, enables coverage warnings")
    s.add_argument("--int8", action="store_true", help="INT8 per-tensor quantization")
    s.add_argument("--calib", help="calibration data for --int8 activation scales")
    s.add_argument("--out", required=True, help="output plan JSON (weights go to a sibling .nmwt)")
    s.set_defaults(fn=cmd_lower)

    s = sub.add_parser("run", help="execute a plan and compare it with the exact graph")
    s.add_argument("--plan", required=True, help="plan JSON")
    s.add_argument("--input", required=True, help="input data (CSV or NMWT)")
    s.add_argument("--out", required=True, help="output tensors (NMWT)")
    s.add_argument("--fidelity", default="fidelity.csv", help="fidelity CSV (default fidelity.csv)")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("simulate", help="accelerator cost of every primitive of a plan")
    s.add_argument("--plan", required=True, help="plan JSON")
    s.add_argument("--accel", help="accelerator JSON (default: built-in)")
    s.add_argument("--energy-budget", type=float, help="per-matmul energy budget in joules")
    s.add_argument("--out", default="cost.csv", help="output CSV (default cost.csv)")
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("search", help="best blocking for one GEMM")
    s.add_argument("--m", type=int, required=True, help="rows of A")
    s.add_argument("--k", type=int, required=True, help="inner dimension")
    s.add_argument("--n", type=int, required=True, help="columns of B")
    s.add_argument("--accel", help="accelerator JSON (default: built-in)")
    s.add_argument("--energy-budget", type=float, help="energy budget in joules")
    s.add_argument("--out", default="blocking.json", help="output JSON (default blocking.json)")
    s.set_defaults(fn=cmd_search)

    s = sub.add_parser("train", help="fine-tune a plan's weights through its PWL tables")
    s.add_argument("--plan", required=True, help="plan JSON")
    s.add_argument("--data", required=True, help="training data, CSV rows 'label, f_1..f_d'")
    s.add_argument("--config", required=True, help="training config JSON (lr, epochs, batch_size, seed, acc_th, momentum)")
    s.add_argument("--eval-data", help="held-out data for eval_acc")
    s.add_argument("--exact", action="store_true", help="use exact nonlinearities instead of tables")
    s.add_argument("--out", required=True, help="output plan JSON")
    s.add_argument("--metrics", default="metrics.csv", help="per-epoch metrics CSV (default metrics.csv)")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("report", help="parameter overhead, efficiency and fidelity summary for plans")
    s.add_argument("--inputs", nargs="+", required=True, help="plan JSON files")
    s.add_argument("--accel", help="accelerator JSON (default: built-in)")
    s.add_argument("--data", help="inputs for the fidelity column")
    s.add_argument("--out", default="summary.csv", help="output CSV (default summary.csv)")
    s.set_defaults(fn=cmd_report)
    return p


def _fail(code: int, message: str, context=None) -> int:
    print(json.dumps({"code": code, "message": message, "context": context or {}}, sort_keys=True, default=str),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.fn(args)
    except SystemExit as e:          # --help / --version
        return int(e.code or 0)
    except UsageError as e:
        return _fail(1, str(e))
    except NeumatError as e:
        return _fail(e.exit_code, e.message, e.context)
    except (OSError, json.JSONDecodeError, KeyError) as e:
        return _fail(2, f"{type(e).__name__}: {e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
