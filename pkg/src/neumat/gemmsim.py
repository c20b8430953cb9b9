"""Analytical latency/energy model of a systolic GEMM accelerator.

Model summary (all traffic in bytes, ``w`` bytes per word):

* The stationary operand decides which two loop dimensions sit on the PE
  grid: Output -> (m, n), Weight -> (k, n), Input -> (m, k). The spatial tile
  must fit the PE count; compute cycles are
  ``ceil(spatial_1/t1) * ceil(spatial_2/t2) * temporal_extent``.
* L1 (per cluster) holds the two streamed operand tiles, double buffered;
  the spatial tile occupies ``ceil(t1*t2 / PEs-per-cluster)`` clusters.
* L2 holds double-buffered tiles of all three operands; the remaining room
  holds reuse panels. An operand whose independent loop encloses one of its
  own loops is re-streamed once per trip of that loop unless its panel is
  resident. Output re-streaming means partial-sum spills (write + read back).
  Panels are chosen to maximize DRAM bytes saved.
* Latency = max(compute, NoC, DRAM) cycles under double buffering, plus the
  un-overlapped first tile load and last tile write-back.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np

from . import kernels
from .errors import ArgumentError, InfeasibleError

STATIONARY = ("Output", "Weight", "Input")
ORDERS = ("mkn", "mnk", "nkm", "nmk", "kmn", "knm")
TILES = tuple(range(2, 129, 2))
_SPATIAL = {"Output": "mn", "Weight": "kn", "Input": "mk"}
_STATUS = {1: "spatial", 2: "l1", 3: "l2"}


@dataclass(frozen=True)
class AcceleratorConfig:
    pe_count: int = 1024
    clusters: int = 8
    frequency_hz: float = 200e6
    l1_bytes: int = 4096          # per cluster
    l2_bytes: int = 1_048_576
    noc_gbps: float = 128.0
    dram_gbps: float = 32.0
    stationary: str = "Output"    # or "all" to search every scheme
    word_bytes: int = 4
    mac_pj: float = 1.0
    l1_pj_per_byte: float = 1.0
    l2_pj_per_byte: float = 6.0
    dram_pj_per_byte: float = 100.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "stationary":
                if v not in STATIONARY and v != "all":
                    raise ArgumentError(f"stationary must be one of {STATIONARY} or 'all', got {v!r}")
            elif not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise ArgumentError(f"{f.name} must be positive, got {v!r}")
        if self.pe_count % self.clusters:
            raise ArgumentError("pe_count must be divisible by clusters")

    @property
    def noc_bytes_per_cycle(self) -> float:
        return self.noc_gbps * 1e9 / 8.0 / self.frequency_hz

    @property
    def dram_bytes_per_cycle(self) -> float:
        return self.dram_gbps * 1e9 / 8.0 / self.frequency_hz

    def stationaries(self):
        return STATIONARY if self.stationary == "all" else (self.stationary,)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AcceleratorConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ArgumentError(f"unknown accelerator keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "AcceleratorConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class DataflowConfig:
    tile_m: int
    tile_k: int
    tile_n: int
    order: str = "mnk"            # temporal loop order, outermost first
    stationary: str = "Output"

    def __post_init__(self):
        if min(self.tile_m, self.tile_k, self.tile_n) < 1:
            raise ArgumentError("tile sizes must be >= 1")
        if sorted(self.order) != ["k", "m", "n"]:
            raise ArgumentError(f"order must permute 'mkn', got {self.order!r}")
        if self.stationary not in STATIONARY:
            raise ArgumentError(f"unknown stationary scheme {self.stationary!r}")

    @property
    def spatial(self) -> str:
        return _SPATIAL[self.stationary]

    def positions(self):
        return self.order.index("m"), self.order.index("k"), self.order.index("n")


@dataclass
class CostReport:
    macs: int = 0
    compute_cycles: int = 0
    noc_cycles: int = 0
    dram_cycles: int = 0
    overhead_cycles: int = 0
    latency_cycles: int = 0
    total_latency_s: float = 0.0
    mac_energy_j: float = 0.0
    l1_energy_j: float = 0.0
    l2_energy_j: float = 0.0
    dram_energy_j: float = 0.0
    energy_pj: float = 0.0
    dram_bytes: int = 0
    l2_bytes_moved: int = 0
    l2_accesses: int = 0
    pe_utilization: float = 0.0
    feasible: bool = True
    violated: str = ""

    @property
    def energy_j(self) -> float:
        return self.mac_energy_j + self.l1_energy_j + self.l2_energy_j + self.dram_energy_j

    def __add__(self, other: "CostReport") -> "CostReport":
        out = CostReport()
        for f in fields(CostReport):
            if f.name in ("pe_utilization", "feasible", "violated"):
                continue
            setattr(out, f.name, getattr(self, f.name) + getattr(other, f.name))
        out.feasible = self.feasible and other.feasible
        out.violated = self.violated or other.violated
        return out


def compulsory_bytes(M, K, N, word_bytes=4) -> int:
    return word_bytes * (M * K + K * N + M * N)


def _cdiv(a, b):
    return -(-a // b)


def cost_model(M: int, K: int, N: int, df: DataflowConfig, acc: AcceleratorConfig = AcceleratorConfig()) -> CostReport:
    """Cost of one ``(M x K) @ (K x N)`` under a blocking; infeasible configs are flagged, not raised."""
    if min(M, K, N) < 1:
        raise ArgumentError("matrix dimensions must be >= 1")
    w = acc.word_bytes
    tm, tk, tn = df.tile_m, df.tile_k, df.tile_n
    pm, pk, pn = df.positions()
    Tm, Tk, Tn = _cdiv(M, tm), _cdiv(K, tk), _cdiv(N, tn)
    em, ek, en = min(tm, M), min(tk, K), min(tn, N)
    if df.stationary == "Output":
        spatial, compute, need_l1 = tm * tn, Tm * Tn * K, 2 * w * (tm * tk + tk * tn)
    elif df.stationary == "Weight":
        spatial, compute, need_l1 = tk * tn, Tk * Tn * M, 2 * w * (tm * tk + tm * tn)
    else:
        spatial, compute, need_l1 = tm * tk, Tm * Tk * N, 2 * w * (tk * tn + tm * tn)
    macs = M * K * N
    if spatial > acc.pe_count:
        return CostReport(macs=macs, feasible=False, violated="spatial")
    clusters_used = _cdiv(spatial, acc.pe_count // acc.clusters)
    if need_l1 > clusters_used * acc.l1_bytes:
        return CostReport(macs=macs, feasible=False, violated="l1")
    ws = 2 * w * (tm * tk + tk * tn + tm * tn)
    if ws > acc.l2_bytes:
        return CostReport(macs=macs, feasible=False, violated="l2")

    base_a, base_b, base_c = w * M * K, w * K * N, w * M * N
    r_a = Tn if pn < max(pm, pk) else 1
    r_b = Tm if pm < max(pk, pn) else 1
    r_c = Tk if pk < max(pm, pn) else 1
    pan_a = w * (M if pm > pn else em) * (K if pk > pn else ek)
    pan_b = w * (K if pk > pm else ek) * (N if pn > pm else en)
    pan_c = w * (M if pm > pk else em) * (N if pn > pk else en)
    cands = ((r_a, pan_a, base_a * (r_a - 1)), (r_b, pan_b, base_b * (r_b - 1)), (r_c, pan_c, base_c * (2 * r_c - 2)))
    room = acc.l2_bytes - ws
    best_save, best_mask = -1, 0
    for mask in range(8):
        chosen = [c for bit, c in zip((1, 2, 4), cands) if mask & bit]
        if any(r <= 1 for r, _, _ in chosen):
            continue
        used = sum(p for _, p, _ in chosen)
        save = sum(s for _, _, s in chosen)
        if used <= room and save > best_save:
            best_save, best_mask = save, mask
    dram = (base_a * (1 if best_mask & 1 else r_a)
            + base_b * (1 if best_mask & 2 else r_b)
            + base_c * (1 if best_mask & 4 else 2 * r_c - 1))
    moved = (base_a * (1 if pn == 2 else Tn) + base_b * (1 if pm == 2 else Tm)
             + (base_c if pk == 2 else base_c * (2 * Tk - 1)))

    noc = math.ceil(float(moved) / acc.noc_bytes_per_cycle)
    dramc = math.ceil(float(dram) / acc.dram_bytes_per_cycle)
    overhead = (math.ceil(float(w * (em * ek + ek * en)) / acc.dram_bytes_per_cycle)
                + math.ceil(float(w * em * en) / acc.dram_bytes_per_cycle))
    latency = max(compute, noc, dramc) + overhead
    e_mac = acc.mac_pj * float(macs)
    e_l1 = acc.l1_pj_per_byte * float(2 * moved)
    e_l2 = acc.l2_pj_per_byte * float(moved + dram)
    e_dram = acc.dram_pj_per_byte * float(dram)
    return CostReport(
        macs=macs,
        compute_cycles=compute,
        noc_cycles=noc,
        dram_cycles=dramc,
        overhead_cycles=overhead,
        latency_cycles=latency,
        total_latency_s=latency / acc.frequency_hz,
        mac_energy_j=e_mac * 1e-12,
        l1_energy_j=e_l1 * 1e-12,
        l2_energy_j=e_l2 * 1e-12,
        dram_energy_j=e_dram * 1e-12,
        energy_pj=e_mac + e_l1 + e_l2 + e_dram,
        dram_bytes=dram,
        l2_bytes_moved=moved,
        l2_accesses=(moved + dram) // w,
        pe_utilization=macs / (compute * acc.pe_count),
    )


def _order_rows(orders):
    return np.array([[o.index("m"), o.index("k"), o.index("n")] for o in orders], dtype=np.int64)


def search_blocking(M: int, K: int, N: int, acc: AcceleratorConfig = AcceleratorConfig(),
                    energy_budget: Optional[float] = None, tiles=TILES, orders=ORDERS):
    """Latency-minimal blocking over the tile grid, loop orders and stationary schemes.

    Ties go to lower energy, then to the lexicographically smallest
    ``(tile_m, tile_k, tile_n, order, stationary)``. ``energy_budget`` is in
    joules. Raises :class:`InfeasibleError` when nothing survives.
    """
    if min(M, K, N) < 1:
        raise ArgumentError("matrix dimensions must be >= 1")
    stats = acc.stationaries()
    stat_rows = np.array([STATIONARY.index(s) for s in stats], dtype=np.int64)
    budget_pj = math.inf if energy_budget is None else float(energy_budget) * 1e12
    best, counts = kernels.search_grid(
        int(M), int(K), int(N), np.asarray(tiles, dtype=np.int64), _order_rows(orders), stat_rows,
        acc.pe_count, acc.clusters, acc.l1_bytes, acc.l2_bytes, acc.word_bytes,
        acc.noc_bytes_per_cycle, acc.dram_bytes_per_cycle,
        acc.mac_pj, acc.l1_pj_per_byte, acc.l2_pj_per_byte, acc.dram_pj_per_byte, budget_pj,
    )
    if best is None:
        names = ("spatial", "l1", "l2", "energy")
        detail = dict(zip(names, counts))
        tight = "energy" if counts[3] else max(names[:3], key=lambda n: detail[n])
        raise InfeasibleError(
            f"no feasible blocking for {M}x{K}x{N}; tightest constraint: {tight}",
            tightest=tight, rejected=detail, energy_budget=energy_budget,
        )
    tm, tk, tn, o, s = best[:5]
    df = DataflowConfig(int(tm), int(tk), int(tn), orders[o], stats[s])
    return df, cost_model(M, K, N, df, acc)


def enumerate_blockings(acc: AcceleratorConfig = AcceleratorConfig(), tiles=TILES, orders=ORDERS):
    """Every config the search visits, in its tie-break order."""
    for tm in tiles:
        for tk in tiles:
            for tn in tiles:
                for o in orders:
                    for s in acc.stationaries():
                        yield DataflowConfig(tm, tk, tn, o, s)


# ---------------------------------------------------------------- plans

PWL_RESIDENT_FRACTION = 0.10


def elementwise_cost(elements: int, acc: AcceleratorConfig, streams_in: int = 1,
                     gather_bytes: int = 0, table_bytes: int = 0) -> CostReport:
    """One MAC per element, operands streamed from DRAM and results written back.

    ``gather_bytes`` is the per-element parameter fetch of a PWL lookup; the
    table is loaded once when it fits in 10% of L2, otherwise every fetch
    goes to DRAM.
    """
    w = acc.word_bytes
    compute = _cdiv(elements, acc.pe_count) if elements else 0
    stream = w * elements * (streams_in + 1)
    if gather_bytes:
        resident = table_bytes <= PWL_RESIDENT_FRACTION * acc.l2_bytes
        dram = stream + (table_bytes if resident else gather_bytes * elements)
        l2 = stream + gather_bytes * elements + (table_bytes if resident else 0)
    else:
        dram, l2 = stream, stream
    dramc = math.ceil(float(dram) / acc.dram_bytes_per_cycle)
    noc = math.ceil(float(l2) / acc.noc_bytes_per_cycle)
    latency = max(compute, noc, dramc)
    e = (acc.mac_pj * elements, acc.l1_pj_per_byte * float(2 * l2),
         acc.l2_pj_per_byte * float(l2 + dram), acc.dram_pj_per_byte * float(dram))
    return CostReport(
        macs=elements, compute_cycles=compute, noc_cycles=noc, dram_cycles=dramc, latency_cycles=latency,
        total_latency_s=latency / acc.frequency_hz,
        mac_energy_j=e[0] * 1e-12, l1_energy_j=e[1] * 1e-12, l2_energy_j=e[2] * 1e-12, dram_energy_j=e[3] * 1e-12,
        energy_pj=e[0] + e[1] + e[2] + e[3], dram_bytes=dram, l2_bytes_moved=l2, l2_accesses=(l2 + dram) // w,
        pe_utilization=elements / (compute * acc.pe_count) if compute else 0.0,
    )


def layout_cost(elements: int, acc: AcceleratorConfig) -> CostReport:
    """Pure data movement: read and write every element once."""
    w = acc.word_bytes
    b = 2 * w * elements
    dramc = math.ceil(float(b) / acc.dram_bytes_per_cycle)
    e_l2, e_dram = acc.l2_pj_per_byte * float(b), acc.dram_pj_per_byte * float(b)
    return CostReport(dram_cycles=dramc, latency_cycles=dramc, total_latency_s=dramc / acc.frequency_hz,
                      l2_energy_j=e_l2 * 1e-12, dram_energy_j=e_dram * 1e-12, energy_pj=e_l2 + e_dram,
                      dram_bytes=b, l2_bytes_moved=b, l2_accesses=b // w)


@dataclass
class PlanCost:
    rows: list              # [(index, kind, source, dims, DataflowConfig|None, CostReport)]
    total: CostReport
    ops: int                # MAC-equivalent operations


def matmul_dims(a_shape, b_shape):
    """(batch, M, K, N) for a plan matmul."""
    if len(b_shape) == 2:
        M = math.prod(a_shape[:-1])
        return 1, M, a_shape[-1], b_shape[-1]
    return math.prod(a_shape[:-2]), a_shape[-2], a_shape[-1], b_shape[-1]


def simulate_plan(plan, acc: AcceleratorConfig = AcceleratorConfig(), energy_budget=None) -> PlanCost:
    """Serial cost of every primitive at the plan's declared shapes."""
    shapes = dict(plan.slots)
    shapes.update({k: v.shape for k, v in plan.constants.items()})
    rows, total, ops = [], CostReport(), 0
    searched = {}
    for i, p in enumerate(plan.prims):
        out_el = math.prod(shapes[p.output])
        df = None
        if p.kind == "matmul":
            batch, M, K, N = matmul_dims(shapes[p.inputs[0]], shapes[p.inputs[1]])
            key = (M, K, N)
            if key not in searched:
                searched[key] = search_blocking(M, K, N, acc, energy_budget)
            df, one = searched[key]
            rep = one
            for _ in range(batch - 1):
                rep = rep + one
            rep.pe_utilization = one.pe_utilization
            dims = f"{batch}x{M}x{K}x{N}"
        elif p.kind == "pwl":
            t = plan.tables[p.attrs["table"]]
            per = 2 if plan.quant is not None else acc.word_bytes
            rep = elementwise_cost(out_el, acc, 1, gather_bytes=2 * per, table_bytes=t.n * 2 * per)
            dims = str(out_el)
        elif p.kind in ("add", "mul"):
            rep = elementwise_cost(out_el, acc, 2)
            dims = str(out_el)
        elif p.kind == "affine":
            rep = elementwise_cost(out_el, acc, 1)
            dims = str(out_el)
        else:
            rep = layout_cost(out_el, acc)
            dims = str(out_el)
        rows.append((i, p.kind, p.source, dims, df, rep))
        total = total + rep
        ops += rep.macs
    total.pe_utilization = (total.macs / (total.compute_cycles * acc.pe_count)) if total.compute_cycles else 0.0
    return PlanCost(rows, total, ops)


def throughput_per_watt(report: CostReport, ops: int) -> float:
    """Operations per second per watt, i.e. operations per joule."""
    if report.total_latency_s <= 0:
        if ops == 0:
            return 0.0
        raise ArgumentError("latency must be > 0")
    if ops == 0:
        return 0.0
    throughput = ops / report.total_latency_s
    power = report.energy_j / report.total_latency_s
    return throughput / power


# ---------------------------------------------------------------- CSV / JSON

CSV_FIELDS = ("index", "kind", "source", "dims", "tile_m", "tile_k", "tile_n", "order", "stationary",
              "macs", "compute_cycles", "noc_cycles", "dram_cycles", "overhead_cycles", "latency_cycles",
              "total_latency_s", "mac_energy_j", "l1_energy_j", "l2_energy_j", "dram_energy_j", "energy_j",
              "dram_bytes", "l2_accesses", "pe_utilization", "ops_per_joule")


def _row(index, kind, source, dims, df, r: CostReport) -> dict:
    return {
        "index": index, "kind": kind, "source": source, "dims": dims,
        "tile_m": df.tile_m if df else "", "tile_k": df.tile_k if df else "", "tile_n": df.tile_n if df else "",
        "order": df.order if df else "", "stationary": df.stationary if df else "",
        "macs": r.macs, "compute_cycles": r.compute_cycles, "noc_cycles": r.noc_cycles,
        "dram_cycles": r.dram_cycles, "overhead_cycles": r.overhead_cycles, "latency_cycles": r.latency_cycles,
        "total_latency_s": repr(r.total_latency_s), "mac_energy_j": repr(r.mac_energy_j),
        "l1_energy_j": repr(r.l1_energy_j), "l2_energy_j": repr(r.l2_energy_j),
        "dram_energy_j": repr(r.dram_energy_j), "energy_j": repr(r.energy_j),
        "dram_bytes": r.dram_bytes, "l2_accesses": r.l2_accesses, "pe_utilization": repr(r.pe_utilization),
        "ops_per_joule": "",
    }


def plan_cost_csv(cost: PlanCost) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    wr.writeheader()
    for row in cost.rows:
        wr.writerow(_row(*row))
    total = _row("total", "aggregate", "", "", None, cost.total)
    total["ops_per_joule"] = repr(throughput_per_watt(cost.total, cost.ops))
    wr.writerow(total)
    return buf.getvalue()


def blocking_to_dict(M, K, N, df: DataflowConfig, rep: CostReport, acc: AcceleratorConfig) -> dict:
    return {
        "format": "neumat.blocking/1",
        "problem": {"m": M, "k": K, "n": N},
        "dataflow": asdict(df) | {"spatial": df.spatial},
        "cost": {k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(rep).items()},
        "accelerator": acc.to_dict(),
    }


def with_l2(acc: AcceleratorConfig, l2_bytes: int) -> AcceleratorConfig:
    return replace(acc, l2_bytes=l2_bytes)
