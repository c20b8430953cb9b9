"""Adaptive Simpson quadrature."""

from __future__ import annotations

from .errors import NumericalError

ABS_TOL = 1e-12
MAX_DEPTH = 40


def integrate(f, a: float, b: float, tol: float = ABS_TOL, max_depth: int = MAX_DEPTH) -> float:
    """Integrate scalar ``f`` over ``[a, b]`` to absolute tolerance ``tol``.

    Each interval is split until the two-panel Simpson estimate agrees with the
    one-panel estimate within ``15*tol`` (tolerance halves with each split);
    the accepted value carries the Richardson correction. Raises
    :class:`NumericalError` when an interval needs more than ``max_depth``
    splits.
    """
    if a == b:
        return 0.0
    sign = 1.0
    if a > b:
        a, b, sign = b, a, -1.0
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    total = 0.0
    # explicit stack keeps deep refinement off the Python call stack
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    while stack:
        lo, hi, flo, fmid, fhi, est, eps, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi)
        delta = left + right - est
        if abs(delta) <= 15.0 * eps:
            total += left + right + delta / 15.0
            continue
        if depth >= max_depth:
            raise NumericalError(
                "adaptive quadrature did not converge",
                interval=[lo, hi], depth=depth, residual=abs(delta),
            )
        stack.append((mid, hi, fmid, frm, fhi, right, 0.5 * eps, depth + 1))
        stack.append((lo, mid, flo, flm, fmid, left, 0.5 * eps, depth + 1))
    return sign * total
