"""Limited-memory BFGS with a strong-Wolfe line search."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from moescale.errors import OptimizerError

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class LbfgsOptions:
    m: int = 10
    max_iter: int = 500
    grad_tol: float = 1e-8
    c1: float = 1e-4
    c2: float = 0.9
    max_linesearch: int = 40
    # consecutive line-search failures tolerated before giving up
    max_restarts: int = 1


@dataclass(frozen=True)
class OptimizerReport:
    iterations: int
    final_gradient_norm: float
    converged: bool
    history_size: int
    line_search_evals: int
    final_value: float = math.nan
    message: str = ""


class _LineSearchFailure(Exception):
    pass


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimiser of the cubic interpolating (a, fa, ga), (b, fb, gb), or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0.0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = gb - ga + 2.0 * d2
    if denom == 0.0:
        return None
    t = b - (b - a) * (gb + d2 - d1) / denom
    return t if math.isfinite(t) else None


def strong_wolfe(fun: Objective, x, f0, g0, p, step, c1=1e-4, c2=0.9, max_evals=40):
    """Step length satisfying the strong Wolfe conditions along ``p``.

    Returns (step, f, g, evals). Trial points where ``fun`` is not finite
    are treated as too long.
    """
    d0 = float(g0 @ p)
    if not d0 < 0.0:
        raise _LineSearchFailure("not a descent direction")
    evals = 0

    def phi(a):
        nonlocal evals
        evals += 1
        f, g = fun(x + a * p)
        if not (math.isfinite(f) and np.all(np.isfinite(g))):
            return math.inf, None, math.nan
        return f, g, float(g @ p)

    def zoom(lo, f_lo, d_lo, g_lo, hi, f_hi, d_hi):
        while evals < max_evals:
            a = None
            if math.isfinite(f_hi) and math.isfinite(d_hi):
                a = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            left, right = min(lo, hi), max(lo, hi)
            margin = 0.1 * (right - left)
            if a is None or not (left + margin <= a <= right - margin):
                a = 0.5 * (lo + hi)
            if a == lo or a == hi:
                break
            f, g, d = phi(a)
            if f > f0 + c1 * a * d0 or f >= f_lo:
                hi, f_hi, d_hi = a, f, d
            else:
                if abs(d) <= -c2 * d0:
                    return a, f, g
                if d * (hi - lo) >= 0.0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo, g_lo = a, f, d, g
        # fall back to the best sufficient-decrease point found, if any
        if lo > 0.0 and f_lo < f0:
            return lo, f_lo, g_lo
        raise _LineSearchFailure("zoom did not converge")

    a_prev, f_prev, d_prev, g_prev = 0.0, f0, d0, g0
    a = step
    while evals < max_evals:
        f, g, d = phi(a)
        if f > f0 + c1 * a * d0 or (a_prev > 0.0 and f >= f_prev):
            s, fs, gs = zoom(a_prev, f_prev, d_prev, g_prev, a, f, d)
            return s, fs, gs, evals
        if abs(d) <= -c2 * d0:
            return a, f, g, evals
        if d >= 0.0:
            s, fs, gs = zoom(a, f, d, g, a_prev, f_prev, d_prev)
            return s, fs, gs, evals
        a_prev, f_prev, d_prev, g_prev = a, f, d, g
        a *= 2.0
    raise _LineSearchFailure("bracketing did not terminate")


def lbfgs_minimize(fun: Objective, x0, opts: LbfgsOptions | None = None) -> tuple[np.ndarray, OptimizerReport]:
    """Minimise ``fun`` (returning value and gradient) from ``x0``.

    Raises OptimizerError if the objective is not finite at ``x0`` or the
    line search keeps failing; the error carries the last good iterate.
    """
    opts = opts or LbfgsOptions()
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    g = np.asarray(g, dtype=float)
    if not (math.isfinite(f) and np.all(np.isfinite(g))):
        raise OptimizerError("objective or gradient is not finite at the starting point", last_x=x)

    s_hist: deque[np.ndarray] = deque(maxlen=opts.m)
    y_hist: deque[np.ndarray] = deque(maxlen=opts.m)
    rho_hist: deque[float] = deque(maxlen=opts.m)
    ls_evals = 0
    failures = 0
    gnorm = float(np.linalg.norm(g))
    it = 0
    while gnorm > opts.grad_tol and it < opts.max_iter:
        # two-loop recursion
        q = -g
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * float(s @ q)
            alphas.append(a)
            q = q - a * y
        if s_hist:
            q = q * (float(s_hist[-1] @ y_hist[-1]) / float(y_hist[-1] @ y_hist[-1]))
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * float(y @ q)
            q = q + (a - b) * s
        p = q
        step = 1.0 if s_hist else min(1.0, 1.0 / gnorm)
        try:
            t, f_new, g_new, ev = strong_wolfe(fun, x, f, g, p, step, opts.c1, opts.c2, opts.max_linesearch)
        except _LineSearchFailure as exc:
            failures += 1
            if failures > opts.max_restarts or not s_hist:
                report = OptimizerReport(it, gnorm, False, len(s_hist), ls_evals, f, f"line search failed: {exc}")
                err = OptimizerError(f"line search failed after {failures} attempt(s): {exc}", last_x=x)
                err.report = report
                raise err from None
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()
            continue
        ls_evals += ev
        failures = 0
        x_new = x + t * p
        s_vec = x_new - x
        y_vec = g_new - g
        sy = float(s_vec @ y_vec)
        if sy > 1e-12 * float(y_vec @ y_vec) and sy > 0.0:
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            rho_hist.append(1.0 / sy)
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        it += 1
    converged = gnorm <= opts.grad_tol
    msg = "converged" if converged else "iteration limit reached"
    return x, OptimizerReport(it, gnorm, converged, len(s_hist), ls_evals, f, msg)
