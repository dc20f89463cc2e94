"""Derivative-free local minimization: Brent line search and Powell's direction set.

Objectives may return ``inf`` (or ``None``) for undefined points; such
points are never accepted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

GOLD = 1.618033988749895
CGOLD = 0.3819660112501051
ZEPS = 1e-12


@dataclass(frozen=True)
class OptimizerConfig:
    param_tolerance: float = 1e-3
    value_tolerance: float = 1e-4
    max_iterations: int = 50
    bracket_step: float = 1.0

    def __post_init__(self):
        if min(self.param_tolerance, self.value_tolerance, self.bracket_step) <= 0:
            raise ValueError("optimizer tolerances and step must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


class LineMin(NamedTuple):
    x: float
    fun: float
    nfev: int
    converged: bool


class PowellResult(NamedTuple):
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    nfev: int
    history: list


def _safe(f: Callable) -> Callable[..., float]:
    def g(*args):
        v = f(*args)
        if v is None:
            return math.inf
        v = float(v)
        return v if not math.isnan(v) else math.inf
    return g


def bracket_minimum(f: Callable[[float], float], step: float, f0: Optional[float] = None,
                    max_expand: int = 60):
    """Bracket a minimum of ``f`` near 0 by golden expansion downhill.

    Returns ``(a, b, c, fa, fb, fc, nfev)``.  Normally ``fb <= fa`` and
    ``fb <= fc``; if the expansion budget runs out while still descending,
    ``fc < fb`` and the caller should keep ``c`` as a candidate.
    """
    nfev = 0
    if f0 is None:
        f0 = f(0.0)
        nfev += 1
    fp = f(step)
    nfev += 1
    if fp < f0:
        a, fa, b, fb = 0.0, f0, step, fp
    else:
        fm = f(-step)
        nfev += 1
        if fm >= f0:
            return -step, 0.0, step, fm, f0, fp, nfev
        a, fa, b, fb = 0.0, f0, -step, fm
    c = b + GOLD * (b - a)
    fc = f(c)
    nfev += 1
    for _ in range(max_expand):
        if not fc < fb:
            break
        a, fa, b, fb = b, fb, c, fc
        c = b + GOLD * (b - a)
        fc = f(c)
        nfev += 1
    return a, b, c, fa, fb, fc, nfev


def brent_minimize(f: Callable[[float], float], bracket, tol: float = 1e-8,
                   max_iter: int = 100, fb: Optional[float] = None,
                   atol: float = ZEPS) -> LineMin:
    """Brent's parabolic/golden-section minimization inside ``bracket = (a, b, c)``.

    ``tol`` is relative to ``|x|`` and ``atol`` absolute; ``max_iter`` bounds
    the evaluations made beyond the bracket.
    """
    f = _safe(f)
    a0, b0, c0 = (float(v) for v in bracket)
    a, b = min(a0, c0), max(a0, c0)
    x = w = v = b0
    nfev = 0
    if fb is None:
        fx = f(x)
        nfev += 1
    else:
        fx = float(fb)
    fw = fv = fx
    d = e = 0.0
    for _ in range(max_iter):
        xm = 0.5 * (a + b)
        tol1 = tol * abs(x) + atol
        tol2 = 2.0 * tol1
        if abs(x - xm) <= tol2 - 0.5 * (b - a):
            return LineMin(x, fx, nfev, True)
        use_golden = True
        if abs(e) > tol1 and math.isfinite(fx) and math.isfinite(fw) and math.isfinite(fv):
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            etemp = e
            e = d
            if not (abs(p) >= abs(0.5 * q * etemp) or p <= q * (a - x) or p >= q * (b - x)):
                d = p / q
                u = x + d
                if u - a < tol2 or b - u < tol2:
                    d = math.copysign(tol1, xm - x)
                use_golden = False
        if use_golden:
            e = (a - x) if x >= xm else (b - x)
            d = CGOLD * e
        u = x + d if abs(d) >= tol1 else x + math.copysign(tol1, d)
        fu = f(u)
        nfev += 1
        if fu <= fx:
            if u >= x:
                a = x
            else:
                b = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return LineMin(x, fx, nfev, False)


def line_minimize(f: Callable[[np.ndarray], float], x: np.ndarray, fx: float,
                  direction: np.ndarray, step: float, tol: float, max_iter: int = 100):
    """Minimize ``f`` along ``x + s * direction``; returns (new x, f, nfev).

    ``tol`` is the absolute precision on ``s`` times the direction norm.
    """
    dn = float(np.linalg.norm(direction)) or 1.0
    g = lambda s: f(x + s * direction)  # noqa: E731
    a, b, c, fa, fb, fc, nfev = bracket_minimum(g, step, fx)
    if fc < fb:
        # still descending at the end of the expansion budget
        return x + c * direction, fc, nfev
    if b == 0.0 and not (fa > fx or fc > fx):
        return x, fx, nfev
    res = brent_minimize(g, (a, b, c), tol=1e-6, max_iter=max_iter, fb=fb,
                         atol=0.5 * tol / dn)
    nfev += res.nfev
    if res.fun < fx:
        return x + res.x * direction, res.fun, nfev
    return x, fx, nfev


def powell_minimize(f: Callable[[np.ndarray], float], x0, config: OptimizerConfig = OptimizerConfig(),
                    directions: Optional[np.ndarray] = None) -> PowellResult:
    """Powell's direction-set method with Brent line searches.

    Stops when a full sweep lowers the value by less than ``value_tolerance``
    (relative), when the sweep moves ``x`` by less than ``param_tolerance``,
    or after ``max_iterations`` sweeps (``converged`` is then False).
    """
    f = _safe(f)
    x = np.asarray(x0, dtype=np.float64).copy()
    n = x.size
    xi = np.eye(n) if directions is None else np.array(directions, dtype=np.float64)
    fx = f(x)
    nfev = 1
    history = [fx]
    tol = config.param_tolerance
    for it in range(1, config.max_iterations + 1):
        x_start, f_start = x.copy(), fx
        biggest, ibig = 0.0, 0
        for i in range(n):
            f_before = fx
            x, fx, k = line_minimize(f, x, fx, xi[i], config.bracket_step, tol)
            nfev += k
            if f_before - fx > biggest:
                biggest, ibig = f_before - fx, i
        history.append(fx)
        if not math.isfinite(f_start):
            if not math.isfinite(fx):
                return PowellResult(x, fx, it, False, nfev, history)
            continue
        value_done = 2.0 * (f_start - fx) <= config.value_tolerance * (abs(f_start) + abs(fx)) + 1e-20
        param_done = float(np.linalg.norm(x - x_start)) < tol
        if value_done or param_done:
            return PowellResult(x, fx, it, True, nfev, history)
        x_ext = 2.0 * x - x_start
        new_dir = x - x_start
        f_ext = f(x_ext)
        nfev += 1
        if f_ext < f_start:
            t = (2.0 * (f_start - 2.0 * fx + f_ext) * (f_start - fx - biggest) ** 2
                 - biggest * (f_start - f_ext) ** 2)
            if t < 0.0:
                x, fx, k = line_minimize(f, x, fx, new_dir, config.bracket_step, tol)
                nfev += k
                xi[ibig] = xi[n - 1]
                xi[n - 1] = new_dir
                history[-1] = fx
    return PowellResult(x, fx, config.max_iterations, False, nfev, history)
