"""Scalar nonlinear functions that get approximated, with derivatives and monotone pieces."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import special

from .errors import DomainError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class NonlinearFunc:
    """A scalar function plus the metadata the approximation routines need.

    ``forward`` and ``derivative`` accept floats or numpy arrays. ``pieces``
    lists the monotone subintervals as ``(lo, hi, direction)`` with direction
    ``+1``/``-1``; together they cover the domain (poles excluded).
    ``antiderivative`` is optional; when present, integrals use it instead of
    quadrature.
    """

    name: str
    forward: Callable
    derivative: Callable
    pieces: tuple
    poles: tuple = ()
    domain: tuple = (-math.inf, math.inf)
    antiderivative: Optional[Callable] = field(default=None, compare=False)

    def __call__(self, x):
        return self.forward(x)

    def check_range(self, lo: float, hi: float) -> None:
        dlo, dhi = self.domain
        if lo < dlo or hi > dhi:
            raise DomainError(
                f"range [{lo}, {hi}] leaves the domain of {self.name}",
                function=self.name, range=[lo, hi], domain=[dlo, dhi],
            )
        for p in self.poles:
            if lo <= p <= hi:
                raise DomainError(
                    f"range [{lo}, {hi}] contains the pole of {self.name} at {p}",
                    function=self.name, range=[lo, hi], pole=p,
                )

    def piece_at(self, x: float, direction: int = 1):
        """Monotone piece containing ``x``.

        At a junction between pieces the one extending in ``direction`` wins.
        """
        for lo, hi, sign in self.pieces:
            if direction > 0 and lo <= x < hi:
                return lo, hi, sign
            if direction < 0 and lo < x <= hi:
                return lo, hi, sign
        for lo, hi, sign in self.pieces:
            if lo <= x <= hi:
                return lo, hi, sign
        return None


def _gelu(x):
    if np.ndim(x):
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * x * (1.0 + special.erf(x / _SQRT2))
    return 0.5 * x * (1.0 + math.erf(x / _SQRT2))


def _gelu_grad(x):
    if np.ndim(x):
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * (1.0 + special.erf(x / _SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + math.erf(x / _SQRT2)) + x * _INV_SQRT2PI * math.exp(-0.5 * x * x)


def _gelu_minimum() -> float:
    # stationary point of GELU: root of its derivative on [-2, 0]
    lo, hi = -2.0, 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _gelu_grad(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return 0.5 * (lo + hi)


GELU_MIN_X = _gelu_minimum()


def _np_or_math(npf, mf):
    def f(x):
        if np.ndim(x):
            return npf(np.asarray(x, dtype=np.float64))
        return mf(x)

    return f


def _sigmoid(x):
    if np.ndim(x):
        x = np.asarray(x, dtype=np.float64)
        return special.expit(x)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def _sigmoid_grad(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


INF = math.inf

EXP = NonlinearFunc(
    "exp",
    _np_or_math(np.exp, math.exp),
    _np_or_math(np.exp, math.exp),
    pieces=((-INF, INF, 1),),
    antiderivative=_np_or_math(np.exp, math.exp),
)

RECIPROCAL = NonlinearFunc(
    "reciprocal",
    lambda x: 1.0 / x,
    lambda x: -1.0 / (x * x),
    pieces=((-INF, 0.0, -1), (0.0, INF, -1)),
    poles=(0.0,),
    antiderivative=_np_or_math(lambda x: np.log(np.abs(x)), lambda x: math.log(abs(x))),
)

SQRT = NonlinearFunc(
    "sqrt",
    _np_or_math(np.sqrt, math.sqrt),
    lambda x: 0.5 / np.sqrt(x) if np.ndim(x) else 0.5 / math.sqrt(x),
    pieces=((0.0, INF, 1),),
    domain=(0.0, INF),
    antiderivative=lambda x: (2.0 / 3.0) * x * (np.sqrt(x) if np.ndim(x) else math.sqrt(x)),
)

RSQRT = NonlinearFunc(
    "rsqrt",
    lambda x: 1.0 / np.sqrt(x) if np.ndim(x) else 1.0 / math.sqrt(x),
    lambda x: -0.5 * np.power(x, -1.5) if np.ndim(x) else -0.5 * x ** -1.5,
    pieces=((0.0, INF, -1),),
    poles=(0.0,),
    domain=(0.0, INF),
)

GELU = NonlinearFunc(
    "gelu",
    _gelu,
    _gelu_grad,
    pieces=((-INF, GELU_MIN_X, -1), (GELU_MIN_X, INF, 1)),
)

TANH = NonlinearFunc(
    "tanh",
    _np_or_math(np.tanh, math.tanh),
    lambda x: 1.0 - np.tanh(x) ** 2 if np.ndim(x) else 1.0 - math.tanh(x) ** 2,
    pieces=((-INF, INF, 1),),
)

SIGMOID = NonlinearFunc(
    "sigmoid",
    _sigmoid,
    _sigmoid_grad,
    pieces=((-INF, INF, 1),),
)

ERF = NonlinearFunc(
    "erf",
    _np_or_math(special.erf, math.erf),
    lambda x: (2.0 / math.sqrt(math.pi)) * (np.exp(-np.asarray(x) ** 2) if np.ndim(x) else math.exp(-x * x)),
    pieces=((-INF, INF, 1),),
)

SQUARE = NonlinearFunc(
    "square",
    lambda x: x * x,
    lambda x: 2.0 * x,
    pieces=((-INF, 0.0, -1), (0.0, INF, 1)),
    antiderivative=lambda x: x * x * x / 3.0,
)

# already piecewise linear; registered so exact-mode execution can name it
RELU = NonlinearFunc(
    "relu",
    lambda x: np.maximum(x, 0.0) if np.ndim(x) else max(x, 0.0),
    lambda x: (np.asarray(x) > 0).astype(np.float64) if np.ndim(x) else float(x > 0),
    pieces=((-INF, INF, 1),),
)

FUNCTIONS = {f.name: f for f in (EXP, RECIPROCAL, SQRT, RSQRT, GELU, TANH, SIGMOID, ERF, SQUARE, RELU)}


def linear(slope: float, intercept: float = 0.0) -> NonlinearFunc:
    """Affine function ``slope*x + intercept``; handy for exactness checks."""
    direction = 1 if slope >= 0 else -1
    return NonlinearFunc(
        f"linear({slope!r},{intercept!r})",
        lambda x: slope * x + intercept,
        lambda x: slope + 0.0 * np.asarray(x) if np.ndim(x) else slope,
        pieces=((-INF, INF, direction),),
        antiderivative=lambda x: 0.5 * slope * x * x + intercept * x,
    )


def get(name) -> NonlinearFunc:
    if isinstance(name, NonlinearFunc):
        return name
    key = str(name).lower()
    if key not in FUNCTIONS:
        raise DomainError(f"unknown function {name!r}", known=sorted(FUNCTIONS))
    return FUNCTIONS[key]
