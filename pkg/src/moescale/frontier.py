"""Compute-optimal quantities from fitted surfaces and raw isoFLOP groups."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from moescale.errors import EvaluationError, InsufficientDataError, MoeScaleError
from moescale.runs import RunTable
from moescale.surface import SIZE_COLUMNS, SizeVariable, SurfaceFit, transform_features

N_SCAN = 1024
REL_TOL = 1e-6
S_MAX = 0.99
DOMAIN_PAD_DECADES = 0.5
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


class ScanResult(NamedTuple):
    x: float
    value: float
    at_boundary: bool


def _golden(f: Callable[[float], float], a: float, b: float, tol: float) -> tuple[float, float]:
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def _newton_polish(poly: np.ndarray, x: float, lo: float, hi: float) -> float:
    """Newton steps on the derivative of an ascending-coefficient polynomial."""
    P = np.polynomial.Polynomial(poly)
    d1, d2 = P.deriv(1), P.deriv(2)
    for _ in range(50):
        g, h = d1(x), d2(x)
        if h <= 0.0 or not math.isfinite(g):
            break
        step = g / h
        x_new = min(max(x - step, lo), hi)
        if x_new == x:
            break
        x = x_new
    return x


def scan_minimize(
    f: Callable[[np.ndarray], np.ndarray],
    lo: float,
    hi: float,
    *,
    n_scan: int = N_SCAN,
    rel_tol: float = REL_TOL,
    poly: np.ndarray | None = None,
) -> ScanResult:
    """Minimise a 1-D function on [lo, hi]: grid scan, then golden section.

    ``f`` must accept arrays. The first (smallest) grid point wins ties. If
    ``poly`` holds the ascending coefficients of ``f`` as a polynomial, the
    refined point is finished with Newton steps on its derivative.
    """
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        raise ValueError(f"invalid search interval [{lo}, {hi}]")
    grid = np.linspace(lo, hi, max(n_scan, 3))
    vals = np.asarray(f(grid), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise EvaluationError("objective is not finite on the search interval")
    i = int(np.argmin(vals))
    best_x, best_v = float(grid[i]), float(vals[i])
    a = float(grid[max(i - 1, 0)])
    b = float(grid[min(i + 1, len(grid) - 1)])
    tol = rel_tol * max(1.0, abs(best_x))

    def f1(t: float) -> float:
        return float(f(np.array([t]))[0])

    x, v = _golden(f1, a, b, tol)
    if poly is not None:
        xp = _newton_polish(poly, x, a, b)
        vp = f1(xp)
        # near a vertex f is flat to rounding; trust the exact stationary point
        if vp <= v + 8.0 * np.finfo(float).eps * max(1.0, abs(v)):
            x, v = xp, vp
    if v > best_v:
        x, v = best_x, best_v
    # a refined point pressed against an interval edge is a boundary optimum
    at_boundary = False
    for edge in (lo, hi):
        if abs(x - edge) <= tol:
            fe = f1(edge)
            if fe <= v:
                x, v = edge, fe
            at_boundary = True
    return ScanResult(x, v, at_boundary)


@dataclass(frozen=True)
class FrontierPoint:
    budget: float | None
    constraint: str
    constraint_value: float
    size_variable: str
    opt_size: float
    opt_sparsity: float
    opt_loss: float
    at_boundary: bool
    extrapolated: bool
    source: str

    def to_dict(self) -> dict:
        return asdict(self)


def default_size_interval(fit: SurfaceFit) -> tuple[float, float]:
    dom = fit.fit_domain
    if not dom:
        raise ValueError("surface has no fit_domain; pass an explicit search interval")
    pad = 10.0**DOMAIN_PAD_DECADES
    return dom["size_min"] / pad, dom["size_max"] * pad


def optimal_size_given_sparsity(
    fit: SurfaceFit,
    sparsity: float,
    search: tuple[float, float] | None = None,
    *,
    n_scan: int = N_SCAN,
    source: str = "surface",
) -> FrontierPoint:
    """Argmin over size of the surface at a fixed sparsity."""
    lo, hi = search or default_size_interval(fit)
    if lo <= 0:
        raise ValueError("size interval must be positive")
    _, y = transform_features(1.0, sparsity)
    res = scan_minimize(
        lambda x: fit.evaluate(x, y),
        math.log(lo),
        math.log(hi),
        n_scan=n_scan,
        poly=fit.poly_in_size(y),
    )
    size = math.exp(res.x)
    return FrontierPoint(
        budget=fit.budget,
        constraint="fixed_sparsity",
        constraint_value=float(sparsity),
        size_variable=fit.size_variable,
        opt_size=size,
        opt_sparsity=float(sparsity),
        opt_loss=res.value,
        at_boundary=res.at_boundary,
        extrapolated=not fit.in_domain(size, sparsity),
        source=source,
    )


def optimal_sparsity_given_size(
    fit: SurfaceFit,
    size: float,
    search: tuple[float, float] = (0.0, S_MAX),
    *,
    n_scan: int = N_SCAN,
    source: str = "surface",
) -> FrontierPoint:
    """Argmin over sparsity (scanned in -ln(1 - S)) at a fixed size."""
    s_lo, s_hi = search
    if not 0.0 <= s_lo < s_hi < 1.0:
        raise ValueError(f"sparsity interval must satisfy 0 <= lo < hi < 1, got {search}")
    x, y_lo = transform_features(size, s_lo)
    _, y_hi = transform_features(size, s_hi)
    res = scan_minimize(
        lambda y: fit.evaluate(x, y),
        y_lo,
        y_hi,
        n_scan=n_scan,
        poly=fit.poly_in_sparsity(x),
    )
    s_opt = float(-math.expm1(-res.x))
    return FrontierPoint(
        budget=fit.budget,
        constraint="fixed_size",
        constraint_value=float(size),
        size_variable=fit.size_variable,
        opt_size=float(size),
        opt_sparsity=s_opt,
        opt_loss=res.value,
        at_boundary=res.at_boundary,
        extrapolated=not fit.in_domain(size, s_opt),
        source=source,
    )


@dataclass(frozen=True)
class QuadraticFit:
    """``L = c0 + c1*x + c2*x**2`` with ``x = ln N``."""

    c0: float
    c1: float
    c2: float
    vertex_size: float | None
    is_minimum: bool

    def __call__(self, size):
        x = np.log(size)
        return self.c0 + self.c1 * x + self.c2 * x * x


def approach2_fit(records: RunTable, size_variable: SizeVariable = "total_params") -> QuadraticFit:
    """Quadratic in log-size through one isoFLOP slice (fixed C and S)."""
    size = records.column(SIZE_COLUMNS[size_variable])
    loss = records.column("loss")
    if len(np.unique(size)) < 3:
        raise InsufficientDataError(f"need at least 3 distinct sizes, got {len(np.unique(size))}")
    x = np.log(size)
    x0 = float(x.mean())
    t = x - x0
    A = np.column_stack([np.ones_like(t), t, t * t])
    (k0, k1, k2), *_ = np.linalg.lstsq(A, loss, rcond=None)
    # shift the centred polynomial back to powers of x
    c2 = float(k2)
    c1 = float(k1 - 2.0 * k2 * x0)
    c0 = float(k0 - k1 * x0 + k2 * x0 * x0)
    scale = float(np.max(np.abs(loss - loss.mean()))) or 1.0
    is_min = k2 > 1e-12 * scale
    vertex = None
    if k2 != 0.0:
        t_star = -k1 / (2.0 * k2)
        with np.errstate(over="ignore"):
            vertex = float(np.exp(x0 + t_star))
    return QuadraticFit(c0, c1, c2, vertex, bool(is_min))


class PowerLaw(NamedTuple):
    exponent: float
    prefactor: float

    def __call__(self, x):
        return self.prefactor * np.asarray(x, dtype=float) ** self.exponent


def power_law_fit(points: Iterable[tuple[float, float]]) -> PowerLaw:
    """Least squares of ln y on ln x: ``y = prefactor * x**exponent``."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise InsufficientDataError("power_law_fit needs at least 2 points")
    x, y = pts[:, 0], pts[:, 1]
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("power_law_fit needs strictly positive x and y")
    lx, ly = np.log(x), np.log(y)
    if np.ptp(lx) == 0:
        raise InsufficientDataError("power_law_fit needs at least 2 distinct x values")
    mx, my = lx.mean(), ly.mean()
    dx = lx - mx
    slope = float(dx @ (ly - my) / (dx @ dx))
    return PowerLaw(slope, float(math.exp(my - slope * mx)))


@dataclass(frozen=True)
class SparsityMapRow:
    budget: float | None
    size: float
    opt_sparsity: float | None
    opt_loss: float | None
    at_boundary: bool | None
    reason: str | None = None


def optimal_sparsity_map(
    fits: Sequence[SurfaceFit],
    size_grid: Sequence[float],
    search: tuple[float, float] = (0.0, S_MAX),
    map_fn=map,
) -> list[SparsityMapRow]:
    """S*(N) for every (budget, size) cell, sorted by (budget, size)."""
    for fit in fits:
        if fit.size_variable != "total_params":
            raise ValueError("optimal_sparsity_map needs surfaces over total parameters")
    cells = [(fit, float(n), search) for fit in fits for n in size_grid]
    rows = list(map_fn(_map_cell, cells))
    return sorted(rows, key=lambda r: (r.budget if r.budget is not None else -math.inf, r.size))


def _map_cell(args) -> SparsityMapRow:
    fit, n, search = args
    try:
        p = optimal_sparsity_given_size(fit, n, search)
    except (MoeScaleError, ValueError) as exc:
        return SparsityMapRow(fit.budget, n, None, None, None, reason=str(exc))
    return SparsityMapRow(fit.budget, n, p.opt_sparsity, p.opt_loss, p.at_boundary)


@dataclass(frozen=True)
class ExponentRow:
    sparsity: float
    exponent: float | None
    prefactor: float | None
    n_budgets: int
    reason: str | None = None


def scaling_exponent_vs_sparsity(
    grouped: Mapping[float, RunTable] | Sequence[tuple[float, RunTable]],
    sparsity_levels: Sequence[float],
    size_variable: SizeVariable = "total_params",
) -> list[ExponentRow]:
    """Exponent ``a`` in ``N* ~ C**a`` per sparsity, from isoFLOP parabola vertices."""
    items = sorted(grouped.items() if isinstance(grouped, Mapping) else grouped, key=lambda kv: kv[0])
    rows = []
    for s in sparsity_levels:
        points, skipped = [], []
        for budget, table in items:
            sl = table.subset(r for r in table if abs(r.sparsity - s) <= 1e-9)
            try:
                q = approach2_fit(sl, size_variable)
            except InsufficientDataError as exc:
                skipped.append(f"C={budget:.3g}: {exc}")
                continue
            if not q.is_minimum or q.vertex_size is None:
                skipped.append(f"C={budget:.3g}: no interior minimum")
                continue
            points.append((budget, q.vertex_size))
        if len(points) < 2:
            reason = f"only {len(points)} budget(s) with a valid vertex"
            if skipped:
                reason += "; " + "; ".join(skipped)
            rows.append(ExponentRow(float(s), None, None, len(points), reason))
            continue
        law = power_law_fit(points)
        rows.append(ExponentRow(float(s), law.exponent, law.prefactor, len(points)))
    return rows


def brute_force_argmin(f: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, n: int = 10_000) -> tuple[float, float]:
    """Exhaustive grid argmin; returns (argmin, grid step)."""
    grid = np.linspace(lo, hi, n)
    vals = np.asarray(f(grid), dtype=float)
    return float(grid[int(np.argmin(vals))]), float(grid[1] - grid[0])
