"""Elastic piecewise-linear approximation of scalar functions.

A table stores breakpoints ``X`` (n+1 values), slopes ``K`` and intercepts
``B`` (n values). Inputs left of ``X[0]`` or right of ``X[-1]`` reuse the
first/last segment. Three construction steps are provided and composed by
:func:`build_elastic`: chord fitting, vertical bias correction and horizontal
(variable-width) segment sizing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import funcs as _funcs
from . import kernels
from .errors import ArgumentError, CapacityError, DomainError, NumericalError
from .funcs import NonlinearFunc
from .quad import ABS_TOL, integrate

FORMAT = "neumat.pwl/1"
BISECT_TOL = 1e-10


@dataclass(frozen=True)
class ElasticConfig:
    delta_lx: float
    delta_ly: float
    e_th: float = 0.0
    max_segments: int = 65536

    def __post_init__(self):
        for name in ("delta_lx", "delta_ly"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ArgumentError(f"{name} must be finite and > 0, got {v}")
        if not (math.isfinite(self.e_th) and self.e_th >= 0):
            raise ArgumentError(f"e_th must be finite and >= 0, got {self.e_th}")
        if self.max_segments < 1:
            raise ArgumentError("max_segments must be >= 1")


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PwlTable:
    function: str
    breakpoints: np.ndarray
    k: np.ndarray
    b: np.ndarray
    corrected: bool = False
    uniform: bool = False
    config: Optional[ElasticConfig] = None

    def __post_init__(self):
        X, K, B = _frozen(self.breakpoints), _frozen(self.k), _frozen(self.b)
        object.__setattr__(self, "breakpoints", X)
        object.__setattr__(self, "k", K)
        object.__setattr__(self, "b", B)
        if X.ndim != 1 or X.size < 2:
            raise ArgumentError("a table needs at least two breakpoints")
        if not np.all(np.diff(X) > 0):
            raise ArgumentError("breakpoints must be strictly increasing")
        if K.shape != (X.size - 1,) or B.shape != K.shape:
            raise ArgumentError("need one slope and one intercept per segment",
                                segments=X.size - 1, k=K.size, b=B.size)

    @property
    def r_min(self) -> float:
        return float(self.breakpoints[0])

    @property
    def r_max(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def n(self) -> int:
        return self.k.size

    def __eq__(self, other):
        if not isinstance(other, PwlTable):
            return NotImplemented
        return (
            self.function == other.function
            and self.corrected == other.corrected
            and self.uniform == other.uniform
            and self.config == other.config
            and np.array_equal(self.breakpoints, other.breakpoints)
            and np.array_equal(self.k, other.k)
            and np.array_equal(self.b, other.b)
        )

    def replace(self, **kw) -> "PwlTable":
        fields = dict(function=self.function, breakpoints=self.breakpoints, k=self.k, b=self.b,
                      corrected=self.corrected, uniform=self.uniform, config=self.config)
        fields.update(kw)
        return PwlTable(**fields)

    def __call__(self, x):
        return evaluate_batch(self, x) if np.ndim(x) else evaluate(self, x)


# ---------------------------------------------------------------- construction

def _check_range(f: NonlinearFunc, r_min: float, r_max: float):
    r_min, r_max = float(r_min), float(r_max)
    if not (math.isfinite(r_min) and math.isfinite(r_max)):
        raise ArgumentError("range endpoints must be finite", range=[r_min, r_max])
    if not r_min < r_max:
        raise ArgumentError(f"empty range [{r_min}, {r_max}]", range=[r_min, r_max])
    f.check_range(r_min, r_max)
    return r_min, r_max


def chord_fit(f, breakpoints, **meta) -> PwlTable:
    """Chord interpolant of ``f`` through the given breakpoints."""
    f = _funcs.get(f)
    X = np.asarray(breakpoints, dtype=np.float64)
    _check_range(f, X[0], X[-1])
    y = np.array([f(float(x)) for x in X])
    K = (y[1:] - y[:-1]) / (X[1:] - X[:-1])
    B = y[:-1] - K * X[:-1]
    return PwlTable(f.name, X, K, B, **meta)


def uniform_breakpoints(r_min: float, r_max: float, n: int) -> np.ndarray:
    X = r_min + (r_max - r_min) * (np.arange(n + 1) / n)
    X[-1] = r_max
    return X


def fit_uniform(f, rng: Sequence[float], n: int) -> PwlTable:
    """Equal-width chord fit with ``n`` segments over ``rng``."""
    f = _funcs.get(f)
    if int(n) != n or n < 1:
        raise ArgumentError(f"segment count must be a positive integer, got {n}")
    r_min, r_max = _check_range(f, *rng)
    return chord_fit(f, uniform_breakpoints(r_min, r_max, int(n)), uniform=True)


def segment_integral(f: NonlinearFunc, a: float, b: float, index: int = -1) -> float:
    if f.antiderivative is not None:
        return float(f.antiderivative(b) - f.antiderivative(a))
    try:
        return integrate(f.forward, a, b, ABS_TOL)
    except NumericalError as e:
        raise NumericalError(f"integral of {f.name} failed on segment {index}",
                             segment=index, **e.context) from None


def expectation_bias(f, table: PwlTable) -> np.ndarray:
    """Per-segment mean of ``f`` minus the mean of its chord.

    Uses the chord through the breakpoint values of ``f``, i.e. the bias of an
    uncorrected table.
    """
    f = _funcs.get(f)
    X = table.breakpoints
    out = np.empty(table.n)
    for i in range(table.n):
        a, b = float(X[i]), float(X[i + 1])
        mean_f = segment_integral(f, a, b, i) / (b - a)
        out[i] = mean_f - 0.5 * (f(a) + f(b))
    return out


def vertical_bias_correction(f, table: PwlTable, e_th: float = 0.0) -> PwlTable:
    """Shift each intercept by its expectation bias when ``|bias| > e_th``."""
    if table.corrected:
        raise ArgumentError("table is already bias-corrected")
    if not (e_th >= 0):
        raise ArgumentError(f"e_th must be >= 0, got {e_th}")
    dE = expectation_bias(f, table)
    B = np.where(np.abs(dE) > e_th, table.b + dE, table.b)
    return table.replace(b=B, corrected=True)


@dataclass
class Segmentation:
    """Breakpoints from horizontal sizing plus how each step was chosen."""

    breakpoints: np.ndarray
    step_kind: list = field(default_factory=list)   # "fixed" | "solved" | "fallback"
    warnings: list = field(default_factory=list)


def _solve_level(f: NonlinearFunc, lo: float, hi: float, target: float, sign: int) -> float:
    # f monotone on [lo, hi] in direction ``sign``; f(lo) on one side of target, f(hi) on the other
    flo = f(lo)
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = f(mid)
        if (fm - target) * (flo - target) > 0:
            lo, flo = mid, fm
        else:
            hi = mid
    return hi


def horizontal_size_optimization(f, cfg: ElasticConfig, rng: Sequence[float]) -> Segmentation:
    """Variable-width breakpoints from ``rng[0]`` to ``rng[1]``.

    A step of ``cfg.delta_lx`` is taken while the function moves by at most
    ``cfg.delta_ly`` across it; otherwise the step ends where the function has
    moved by exactly ``delta_ly`` (bisection within the current monotone piece).
    """
    f = _funcs.get(f)
    r_min, r_max = _check_range(f, *rng)
    X = [r_min]
    kinds, warnings = [], []
    x = r_min
    snap = 1e-12 * (r_max - r_min)
    while x < r_max:
        cand = min(x + cfg.delta_lx, r_max)
        fx = f(x)
        dy = f(cand) - fx
        if abs(dy) <= cfg.delta_ly:
            nxt, kind = cand, "fixed"
        else:
            sign = 1 if dy > 0 else -1
            target = fx + sign * cfg.delta_ly
            piece = f.piece_at(x, +1)
            hi = cand if piece is None else min(cand, piece[1])
            f_hi = f(hi)
            reachable = (
                piece is not None
                and piece[2] == sign
                and hi > x
                and (f_hi - target) * sign >= 0
            )
            if reachable:
                nxt, kind = _solve_level(f, x, hi, target, sign), "solved"
            else:
                nxt, kind = cand, "fallback"
                warnings.append(f"non-monotone bracket [{x!r}, {cand!r}]; fixed step used")
        if r_max - nxt <= snap:
            nxt = r_max
        if nxt <= x:
            raise NumericalError("horizontal sizing stalled", x=x)
        X.append(nxt)
        kinds.append(kind)
        if len(X) - 1 > cfg.max_segments:
            raise CapacityError(
                f"more than {cfg.max_segments} segments needed on [{r_min}, {r_max}]",
                max_segments=cfg.max_segments, reached=x,
            )
        x = nxt
    return Segmentation(np.array(X), kinds, warnings)


def build_elastic(f, rng: Sequence[float], cfg: ElasticConfig) -> PwlTable:
    """Horizontal sizing, then chord fit, then vertical bias correction."""
    f = _funcs.get(f)
    seg = horizontal_size_optimization(f, cfg, rng)
    table = chord_fit(f, seg.breakpoints, config=cfg)
    return vertical_bias_correction(f, table, cfg.e_th)


# ---------------------------------------------------------------- evaluation

def _closed_form_index(table: PwlTable, x: float) -> int:
    X, n = table.breakpoints, table.n
    if x != x:
        return n - 1
    step = (table.r_max - table.r_min) / n
    q = (x - table.r_min) / step
    s = 0 if q < 0 else (n - 1 if q >= n else int(q))
    # rounding in q can be off by one next to a breakpoint
    while s > 0 and x < X[s]:
        s -= 1
    while s < n - 1 and x >= X[s + 1]:
        s += 1
    return s


def _bisect_index(table: PwlTable, x: float) -> int:
    X = table.breakpoints
    lo, hi = 1, table.n
    while lo < hi:
        mid = (lo + hi) // 2
        if x < X[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo - 1


def segment_index(table: PwlTable, x: float) -> int:
    """0-based segment holding ``x``; half-open ``[X[i], X[i+1])``, clamped."""
    x = float(x)
    return _closed_form_index(table, x) if table.uniform else _bisect_index(table, x)


def segment_index_batch(table: PwlTable, xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    shape = xs.shape
    xs = xs.ravel()
    if not table.uniform:
        return kernels.segment_index(table.breakpoints, xs).reshape(shape)
    X, n = table.breakpoints, table.n
    step = (table.r_max - table.r_min) / n
    with np.errstate(invalid="ignore"):
        q = np.floor((xs - table.r_min) / step)
        s = np.clip(np.nan_to_num(q, nan=n - 1, posinf=n - 1, neginf=0), 0, n - 1).astype(np.int64)
    for _ in range(2):
        s = np.where((s > 0) & (xs < X[s]), s - 1, s)
        s = np.where((s < n - 1) & (xs >= X[np.minimum(s + 1, n)]), s + 1, s)
    return s.reshape(shape)


def evaluate(table: PwlTable, x: float) -> float:
    x = float(x)
    s = segment_index(table, x)
    return float(table.k[s] * x + table.b[s])


def evaluate_batch(table: PwlTable, xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    out = kernels.pwl_eval(table.breakpoints, table.k, table.b, xs.ravel())
    return out.reshape(xs.shape)


def slope_at(table: PwlTable, xs) -> np.ndarray:
    """Derivative of the table: the slope of the segment holding each input."""
    xs = np.asarray(xs, dtype=np.float64)
    return table.k[kernels.segment_index(table.breakpoints, xs.ravel())].reshape(xs.shape)


# ---------------------------------------------------------------- error analysis

def segment_mse(f, table: PwlTable) -> np.ndarray:
    """Uniform-weight mean squared error on each segment."""
    f = _funcs.get(f)
    X, K, B = table.breakpoints, table.k, table.b
    out = np.empty(table.n)
    for i in range(table.n):
        a, b = float(X[i]), float(X[i + 1])
        k, c = float(K[i]), float(B[i])

        def err2(x, k=k, c=c):
            d = f(x) - (k * x + c)
            return d * d

        try:
            out[i] = integrate(err2, a, b, ABS_TOL) / (b - a)
        except NumericalError as e:
            raise NumericalError(f"MSE integral failed on segment {i}", segment=i, **e.context) from None
    return out


def mse(f, table: PwlTable, rng: Optional[Sequence[float]] = None, samples=None) -> float:
    """Mean squared approximation error.

    Without ``samples``: uniform weight over ``rng`` (default: the table
    range), integrated piecewise. With ``samples``: their empirical mean.
    """
    f = _funcs.get(f)
    if samples is not None:
        xs = np.asarray(samples, dtype=np.float64).ravel()
        if xs.size == 0:
            raise ArgumentError("empirical MSE needs at least one sample")
        d = f(xs) - evaluate_batch(table, xs)
        return float(np.mean(d * d))
    lo, hi = (table.r_min, table.r_max) if rng is None else (float(rng[0]), float(rng[1]))
    if not lo < hi:
        raise ArgumentError(f"empty range [{lo}, {hi}]")
    f.check_range(lo, hi)
    X = table.breakpoints
    # pieces: [lo, hi] split at interior breakpoints; extension pieces use the end segments
    cuts = [lo] + [float(x) for x in X[1:-1] if lo < x < hi] + [hi]
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        s = segment_index(table, 0.5 * (a + b))
        k, c = float(table.k[s]), float(table.b[s])

        def err2(x, k=k, c=c):
            d = f(x) - (k * x + c)
            return d * d

        total += integrate(err2, a, b, ABS_TOL)
    return total / (hi - lo)


def max_abs_error(f, table: PwlTable, rng=None, points: int = 100_000) -> float:
    f = _funcs.get(f)
    lo, hi = (table.r_min, table.r_max) if rng is None else rng
    xs = np.linspace(lo, hi, points)
    return float(np.max(np.abs(f(xs) - evaluate_batch(table, xs))))


# ---------------------------------------------------------------- serialization

def _s(v: float) -> str:
    return repr(float(v))


def to_dict(table: PwlTable) -> dict:
    cfg = table.config
    return {
        "format": FORMAT,
        "function": table.function,
        "r_min": _s(table.r_min),
        "r_max": _s(table.r_max),
        "uniform": table.uniform,
        "breakpoints": [_s(v) for v in table.breakpoints],
        "k": [_s(v) for v in table.k],
        "b": [_s(v) for v in table.b],
        "corrected": table.corrected,
        "config": None if cfg is None else {
            "delta_lx": _s(cfg.delta_lx),
            "delta_ly": _s(cfg.delta_ly),
            "e_th": _s(cfg.e_th),
            "max_segments": cfg.max_segments,
        },
    }


def from_dict(d: dict) -> PwlTable:
    try:
        cfg = d.get("config")
        if cfg is not None:
            cfg = ElasticConfig(float(cfg["delta_lx"]), float(cfg["delta_ly"]), float(cfg["e_th"]),
                                int(cfg.get("max_segments", 65536)))
        X = [float(v) for v in d["breakpoints"]]
        table = PwlTable(
            d["function"], X, [float(v) for v in d["k"]], [float(v) for v in d["b"]],
            corrected=bool(d["corrected"]), uniform=bool(d["uniform"]), config=cfg,
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ArgumentError):
            raise
        raise ArgumentError(f"malformed table: {e}") from None
    if float(d["r_min"]) != table.r_min or float(d["r_max"]) != table.r_max:
        raise ArgumentError("r_min/r_max disagree with the breakpoints")
    return table


def dumps(table: PwlTable) -> str:
    return json.dumps(to_dict(table), indent=1, sort_keys=True) + "\n"


def loads(text: str) -> PwlTable:
    return from_dict(json.loads(text))


def save(table: PwlTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(table))


def load(path) -> PwlTable:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def relu_table() -> PwlTable:
    """Exact two-segment table for max(x, 0)."""
    return PwlTable("relu", [-1.0, 0.0, 1.0], [0.0, 1.0], [0.0, 0.0])


def exact(table: PwlTable) -> Optional[NonlinearFunc]:
    """The function a table approximates, when it is a registered one."""
    try:
        return _funcs.get(table.function)
    except DomainError:
        return None
