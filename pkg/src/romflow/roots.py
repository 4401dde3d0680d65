"""Bracketed scalar root finding."""
from __future__ import annotations

from typing import Callable

import numpy as np


class BracketError(ValueError):
    """The interval handed to a root finder does not bracket a sign change."""


def bisect(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-12,
           maxiter: int = 200, relative: bool = False) -> float:
    """Root of ``f`` in [lo, hi] by bisection.

    Stops when the bracket is narrower than ``tol`` times max(1, |x|), or
    times |x| when ``relative``, or after ``maxiter`` halvings.
    """
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise BracketError(f"f({lo:.6g}) = {flo:.3g} and f({hi:.6g}) = {fhi:.3g} have the same sign")
    for _ in range(maxiter):
        mid = 0.5 * (lo + hi)
        scale = abs(mid) if relative else max(1.0, abs(mid))
        if hi - lo <= tol * scale or mid in (lo, hi):
            return mid
        fm = f(mid)
        if fm == 0:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sign_changes(f: Callable[[np.ndarray], np.ndarray], a: float, b: float,
                 probes: int) -> list[tuple[float, float]]:
    """Sub-intervals of [a, b] where a vectorized ``f`` changes sign."""
    x = np.linspace(a, b, probes + 1)
    fx = f(x)
    s = np.sign(fx)
    idx = np.flatnonzero(s[:-1] * s[1:] < 0)
    return [(float(x[i]), float(x[i + 1])) for i in idx]
