"""Sparsity-aware parametric scaling law and its robust fit.

    L(N, D, S) = a/N^alpha + b/D^beta + c/(1-S)^lambda + d/((1-S)^delta N^gamma) + e

The dense special case keeps only the a, b and e terms. Coefficients a..e
are optimised in log space, so they stay positive without constraints.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Sequence

import numpy as np

from moescale import kernels
from moescale.errors import FitError, InsufficientDataError
from moescale.frontier import S_MAX, FrontierPoint, power_law_fit, scan_minimize
from moescale.lbfgs import LbfgsOptions, OptimizerReport
from moescale.runs import RunTable

Form = Literal["dense", "moe"]
HUBER_DELTA = 1e-3
MOE_PARAMS = ("log_a", "log_b", "log_c", "log_d", "log_e", "alpha", "beta", "gamma", "lambda_exp", "delta_exp")
DENSE_PARAMS = ("log_a", "log_b", "log_e", "alpha", "beta")

# Initial values searched over for every coefficient.
DEFAULT_GRID = {
    "log_a": (0.0, 10.0, 20.0),
    "log_b": (0.0, 10.0, 20.0),
    "log_c": (0.0, 10.0, 20.0),
    "log_d": (0.0, 10.0, 20.0),
    "log_e": (1.5,),
    "alpha": (0.0, 0.25, 0.5, 0.75, 1.0, 1.25),
    "beta": (0.0, 0.25, 0.5, 0.75, 1.0, 1.25),
    "gamma": (0.0, 0.25, 0.5, 0.75, 1.0, 1.25),
    "lambda_exp": (-1.0, -0.5, 0.0, 0.5, 1.0),
    "delta_exp": (-1.0, -0.5, 0.0, 0.5, 1.0),
}


def _log(v: float) -> float:
    return -math.inf if v == 0 else math.log(v)


@dataclass(frozen=True)
class ScalingLawCoeffs:
    log_a: float
    log_b: float
    log_e: float
    alpha: float
    beta: float
    log_c: float = -math.inf
    log_d: float = -math.inf
    gamma: float = 0.0
    lambda_exp: float = 0.0
    delta_exp: float = 0.0
    form: Form = "moe"

    @classmethod
    def from_values(cls, a, b, e, alpha, beta, c=0.0, d=0.0, gamma=0.0, lambda_exp=0.0, delta_exp=0.0, form: Form = "moe"):
        return cls(
            log_a=_log(a), log_b=_log(b), log_e=_log(e), alpha=alpha, beta=beta,
            log_c=_log(c), log_d=_log(d), gamma=gamma, lambda_exp=lambda_exp,
            delta_exp=delta_exp, form=form,
        )

    @classmethod
    def published_estimate(cls) -> "ScalingLawCoeffs":
        """Published fit of the sparsity-aware law."""
        return cls.from_values(
            a=16612.50, b=5455.67, c=0.4598, d=17.26, e=0.94,
            alpha=0.5962, beta=0.3954, gamma=0.1595, lambda_exp=-0.1666, delta_exp=0.1603,
        )

    a = property(lambda self: math.exp(self.log_a))
    b = property(lambda self: math.exp(self.log_b))
    c = property(lambda self: math.exp(self.log_c))
    d = property(lambda self: math.exp(self.log_d))
    e = property(lambda self: math.exp(self.log_e))

    def vector(self) -> np.ndarray:
        names = MOE_PARAMS if self.form == "moe" else DENSE_PARAMS
        return np.array([getattr(self, n) for n in names], dtype=float)

    @classmethod
    def from_vector(cls, theta: Sequence[float], form: Form = "moe") -> "ScalingLawCoeffs":
        names = MOE_PARAMS if form == "moe" else DENSE_PARAMS
        return cls(form=form, **{n: float(v) for n, v in zip(names, theta)})

    def to_dict(self) -> dict:
        names = MOE_PARAMS if self.form == "moe" else DENSE_PARAMS
        out: dict = {"form": self.form}
        for n in names:
            out[n] = getattr(self, n)
        for n in ("a", "b", "c", "d", "e"):
            if f"log_{n}" in names:
                out[n] = getattr(self, n)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScalingLawCoeffs":
        form = data.get("form", "moe")
        names = MOE_PARAMS if form == "moe" else DENSE_PARAMS
        values = {}
        for n in names:
            if n in data:
                values[n] = float(data[n])
            elif n.startswith("log_") and n[4:] in data:
                values[n] = _log(float(data[n[4:]]))
            elif n == "lambda_exp" and "lambda" in data:
                values[n] = float(data["lambda"])
            else:
                raise ValueError(f"coefficient {n} missing")
        return cls(form=form, **values)


def _features(n, d, sparsity):
    n = np.atleast_1d(np.asarray(n, dtype=float))
    d = np.atleast_1d(np.asarray(d, dtype=float))
    s = np.atleast_1d(np.asarray(sparsity, dtype=float))
    if np.any(n <= 0) or np.any(d <= 0):
        raise ValueError("n and d must be positive")
    if np.any(s >= 1.0) or np.any(s < 0.0):
        raise ValueError("sparsity must lie in [0, 1); the law is singular at S = 1")
    n, d, s = np.broadcast_arrays(n, d, s)
    return (
        np.ascontiguousarray(np.log(n)),
        np.ascontiguousarray(np.log(d)),
        np.ascontiguousarray(np.log1p(-s)),
    )


def _scalar_or_array(x, like):
    return float(x[0]) if np.ndim(like) == 0 else x


def predict_log_loss(coeffs: ScalingLawCoeffs, n, d, sparsity=0.0):
    ln_n, ln_d, ln_1ms = _features(n, d, sparsity)
    out = kernels.law_log_predict(coeffs.vector(), ln_n, ln_d, ln_1ms, coeffs.form == "moe")
    return np.asarray(out)


def predict_loss_dense(coeffs: ScalingLawCoeffs, n, d):
    """``a/n**alpha + b/d**beta + e``."""
    dense = ScalingLawCoeffs(coeffs.log_a, coeffs.log_b, coeffs.log_e, coeffs.alpha, coeffs.beta, form="dense")
    out = np.exp(predict_log_loss(dense, n, d, 0.0))
    return _scalar_or_array(out, np.broadcast(np.asarray(n), np.asarray(d)))


def predict_loss_moe(coeffs: ScalingLawCoeffs, n, d, sparsity):
    out = np.exp(predict_log_loss(coeffs, n, d, sparsity))
    return _scalar_or_array(out, np.broadcast(np.asarray(n), np.asarray(d), np.asarray(sparsity)))


def predict_loss(coeffs: ScalingLawCoeffs, n, d, sparsity=0.0):
    if coeffs.form == "dense":
        return predict_loss_dense(coeffs, n, d)
    return predict_loss_moe(coeffs, n, d, sparsity)


def huber_loss(residual, huber_delta: float = HUBER_DELTA):
    """Quadratic within ``huber_delta`` of zero, linear beyond."""
    if huber_delta <= 0:
        raise ValueError("huber_delta must be positive")
    r = np.asarray(residual, dtype=float)
    a = np.abs(r)
    out = np.where(a <= huber_delta, 0.5 * r * r, huber_delta * (a - 0.5 * huber_delta))
    return float(out) if out.ndim == 0 else out


def huber_grad(residual, huber_delta: float = HUBER_DELTA):
    r = np.asarray(residual, dtype=float)
    out = np.where(np.abs(r) <= huber_delta, r, huber_delta * np.sign(r))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LawData:
    """Precomputed log features of a run table."""

    ln_n: np.ndarray
    ln_d: np.ndarray
    ln_1ms: np.ndarray
    loss: np.ndarray

    @classmethod
    def from_table(cls, records: RunTable) -> "LawData":
        ln_n, ln_d, ln_1ms = _features(records.column("n_total"), records.column("tokens"), records.column("sparsity"))
        return cls(ln_n, ln_d, ln_1ms, np.ascontiguousarray(records.column("loss")))

    def objective(self, form: Form, huber_delta: float = HUBER_DELTA, log_space: bool = True) -> Callable:
        target = np.ascontiguousarray(np.log(self.loss) if log_space else self.loss)
        moe = form == "moe"
        fn = kernels.law_objective_grad

        def f(theta):
            return fn(theta, self.ln_n, self.ln_d, self.ln_1ms, target, huber_delta, moe, log_space)

        return f


def law_objective(coeffs: ScalingLawCoeffs, records: RunTable, huber_delta: float = HUBER_DELTA, log_space: bool = True):
    """Summed Huber loss over the records and its gradient."""
    return LawData.from_table(records).objective(coeffs.form, huber_delta, log_space)(coeffs.vector())


def residuals(coeffs: ScalingLawCoeffs, records: RunTable, log_space: bool = True) -> np.ndarray:
    data = LawData.from_table(records)
    pred = np.asarray(kernels.law_log_predict(coeffs.vector(), data.ln_n, data.ln_d, data.ln_1ms, coeffs.form == "moe"))
    if log_space:
        return pred - np.log(data.loss)
    return np.exp(pred) - data.loss


def evaluate_law(coeffs: ScalingLawCoeffs, records: RunTable, huber_delta: float = HUBER_DELTA, log_space: bool = True) -> tuple[float, float]:
    """(mean squared residual, mean Huber loss) over the records."""
    if len(records) == 0:
        raise InsufficientDataError("evaluate_law needs at least one record")
    r = residuals(coeffs, records, log_space)
    return float(np.mean(r * r)), float(np.mean(huber_loss(r, huber_delta)))


@dataclass(frozen=True)
class ScalingLawFit:
    coeffs: ScalingLawCoeffs
    objective_value: float
    fit_metrics: dict
    holdout_metrics: dict | None
    starts_evaluated: int
    best_start: tuple[float, ...]
    best_start_index: int
    report: OptimizerReport
    huber_delta: float = HUBER_DELTA
    log_space: bool = True
    failed_starts: int = 0
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        rep = self.report
        return {
            "kind": "scaling_law_fit",
            "form": self.coeffs.form,
            "coefficients": self.coeffs.to_dict(),
            "objective_value": self.objective_value,
            "fit_metrics": dict(self.fit_metrics),
            "holdout_metrics": None if self.holdout_metrics is None else dict(self.holdout_metrics),
            "starts_evaluated": self.starts_evaluated,
            "failed_starts": self.failed_starts,
            "best_start": list(self.best_start),
            "best_start_index": self.best_start_index,
            "huber_delta": self.huber_delta,
            "residual_space": "log" if self.log_space else "raw",
            "optimizer": {
                "iterations": rep.iterations,
                "final_gradient_norm": rep.final_gradient_norm,
                "converged": rep.converged,
                "history_size": rep.history_size,
                "line_search_evals": rep.line_search_evals,
            },
            **self.extras,
        }


def grid_starts(form: Form, grid: dict | None = None) -> tuple[list[str], list[tuple[float, ...]]]:
    """Parameter names and the per-parameter value lists, in start order."""
    grid = grid or DEFAULT_GRID
    names = list(MOE_PARAMS if form == "moe" else DENSE_PARAMS)
    missing = [n for n in names if n not in grid]
    if missing:
        raise ValueError(f"initialisation grid lacks {', '.join(missing)}")
    return names, [tuple(float(v) for v in grid[n]) for n in names]


def select_starts(axes: list[tuple[float, ...]], fraction: float = 1.0, seed: int = 0) -> np.ndarray:
    """Sorted flat indices into the Cartesian grid (row-major, lexicographic)."""
    total = math.prod(len(a) for a in axes)
    if fraction >= 1.0:
        return np.arange(total)
    if fraction <= 0.0:
        raise ValueError("starts fraction must be positive")
    k = max(1, int(round(fraction * total)))
    return np.sort(np.random.default_rng(seed).choice(total, size=k, replace=False))


def _start_vector(axes, flat_index: int) -> np.ndarray:
    idx = np.unravel_index(flat_index, [len(a) for a in axes])
    return np.array([axes[j][i] for j, i in enumerate(idx)], dtype=float)


def _optimize(data: "LawData", form: Form, huber_delta: float, log_space: bool, x0: np.ndarray, opts: LbfgsOptions):
    """One L-BFGS run. Returns (f, x, report, failed); x is None on a non-finite start."""
    target = np.ascontiguousarray(np.log(data.loss) if log_space else data.loss)
    x, f, gnorm, iters, evals, hist, status = kernels.lbfgs_law(
        x0, data.ln_n, data.ln_d, data.ln_1ms, target, huber_delta, form == "moe", log_space,
        opts.m, opts.max_iter, opts.grad_tol, opts.c1, opts.c2, opts.max_linesearch, opts.max_restarts,
    )
    if status == 3 or not math.isfinite(f):
        return math.inf, None, None, True
    msg = ("converged", "iteration limit reached", "line search failed")[status]
    rep = OptimizerReport(int(iters), float(gnorm), status == 0, int(hist), int(evals), float(f), msg)
    return float(f), np.asarray(x), rep, status == 2


def _run_starts(args):
    data, form, huber_delta, log_space, axes, indices, opts = args
    return [
        (int(flat), *_optimize(data, form, huber_delta, log_space, _start_vector(axes, int(flat)), opts))
        for flat in indices
    ]


def _check_variation(records: RunTable, form: Form, n_params: int) -> None:
    if len(records) < n_params + 2:
        raise InsufficientDataError(
            f"insufficient variation: {len(records)} records for {n_params} free parameters (need {n_params + 2})"
        )
    cols = ["n_total", "tokens"] + (["sparsity"] if form == "moe" else [])
    for col in cols:
        if len(np.unique(records.column(col))) < 2:
            raise InsufficientDataError(f"insufficient variation: column {col} takes a single value")


def fit_law(
    records: RunTable,
    form: Form = "moe",
    init_grid: dict | None = None,
    opts: LbfgsOptions | None = None,
    *,
    huber_delta: float = HUBER_DELTA,
    log_space: bool = True,
    starts_fraction: float = 1.0,
    seed: int = 0,
    holdout: RunTable | None = None,
    workers: int = 1,
    chunk_size: int = 256,
    polish_iter: int = 5000,
) -> ScalingLawFit:
    """Fit the law by L-BFGS from every grid start; keep the best objective.

    Ties on the objective go to the earlier start in grid order, so the
    result does not depend on ``workers``. The winner is then restarted with
    a fresh history and ``polish_iter`` iterations (0 disables this), and the
    polished point is kept only if it lowers the objective.
    """
    names, axes = grid_starts(form, init_grid)
    _check_variation(records, form, len(names))
    opts = opts or LbfgsOptions()
    data = LawData.from_table(records)
    indices = select_starts(axes, starts_fraction, seed)
    chunks = [indices[i : i + chunk_size] for i in range(0, len(indices), chunk_size)]
    jobs = [(data, form, huber_delta, log_space, axes, c, opts) for c in chunks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for chunk in pool.map(_run_starts, jobs) for r in chunk]
    else:
        results = [r for job in jobs for r in _run_starts(job)]

    ok = [r for r in results if r[2] is not None]
    if not ok:
        raise FitError(f"all {len(results)} starts failed (non-finite objective or optimizer error)")
    flat, best_f, best_x, rep, _ = min(ok, key=lambda r: (r[1], r[0]))
    if rep is None:
        rep = OptimizerReport(0, math.nan, False, 0, 0, best_f, "line search failed")
    if polish_iter > 0:
        polish_opts = replace(opts, max_iter=polish_iter)
        pf, px, prep, _ = _optimize(data, form, huber_delta, log_space, best_x, polish_opts)
        if px is not None and pf < best_f:
            best_f, best_x, rep = pf, px, prep
    coeffs = ScalingLawCoeffs.from_vector(best_x, form)
    mse, hub = evaluate_law(coeffs, records, huber_delta, log_space)
    hold = None
    if holdout is not None and len(holdout):
        h_mse, h_hub = evaluate_law(coeffs, holdout, huber_delta, log_space)
        hold = {"mse": h_mse, "huber": h_hub, "n_records": len(holdout)}
    return ScalingLawFit(
        coeffs=coeffs,
        objective_value=best_f,
        fit_metrics={"mse": mse, "huber": hub, "n_records": len(records)},
        holdout_metrics=hold,
        starts_evaluated=len(results),
        best_start=tuple(float(v) for v in _start_vector(axes, flat)),
        best_start_index=int(flat),
        report=rep,
        huber_delta=huber_delta,
        log_space=log_space,
        failed_starts=sum(1 for r in results if r[4]),
    )


def grid_size(form: Form = "moe", grid: dict | None = None) -> int:
    _, axes = grid_starts(form, grid)
    return math.prod(len(a) for a in axes)


@dataclass(frozen=True)
class ExponentResult:
    exponent: float
    prefactor: float
    closed_form: float | None
    table: list[dict]


def compute_optimal_exponent(
    coeffs: ScalingLawCoeffs,
    form: Form | None = None,
    sparsity: float = 0.0,
    na_model: Callable[[np.ndarray], np.ndarray] | None = None,
    budgets: Sequence[float] | None = None,
    size_interval: tuple[float, float] = (1e3, 1e18),
) -> ExponentResult:
    """Exponent ``a`` in ``N* ~ C**a`` along the compute-optimal frontier.

    For every budget, D = C / (6 * N_a(N)) and the loss is minimised over N
    by grid scan plus golden section; ``a`` is the log-log slope of N*
    against C. For the dense form the closed form beta/(alpha+beta) is also
    returned.
    """
    form = form or coeffs.form
    na_model = na_model or (lambda n: n)
    budgets = list(budgets) if budgets is not None else list(np.logspace(18, 24, 13))
    closed = None
    if form == "dense":
        if not (coeffs.alpha > 0 and coeffs.beta > 0):
            raise ValueError("closed form needs alpha > 0 and beta > 0")
        closed = coeffs.beta / (coeffs.alpha + coeffs.beta)
    lo, hi = math.log(size_interval[0]), math.log(size_interval[1])
    rows, points = [], []
    for c in budgets:
        def f(x, c=c):
            n = np.exp(x)
            d = c / (6.0 * na_model(n))
            if form == "dense":
                return predict_loss_dense(coeffs, n, d)
            return predict_loss_moe(coeffs, n, d, np.full_like(n, sparsity))

        res = scan_minimize(f, lo, hi)
        n_opt = math.exp(res.x)
        rows.append({"compute": float(c), "opt_size": n_opt, "opt_loss": res.value, "at_boundary": res.at_boundary})
        if not res.at_boundary:
            points.append((c, n_opt))
    if len(points) < 2:
        raise InsufficientDataError("fewer than two budgets have an interior optimum")
    law = power_law_fit(points)
    return ExponentResult(law.exponent, law.prefactor, closed, rows)


def _na_or_identity(na_model):
    return na_model or (lambda n, s: n)


def law_optimal_size(
    coeffs: ScalingLawCoeffs,
    budget: float,
    sparsity: float,
    na_model: Callable | None = None,
    size_interval: tuple[float, float] = (1e6, 1e14),
) -> FrontierPoint:
    """N* at fixed compute and sparsity, with D = C / (6 * na_model(N, S))."""
    na = _na_or_identity(na_model)
    lo, hi = size_interval

    def f(x):
        n = np.exp(x)
        return predict_loss(coeffs, n, budget / (6.0 * na(n, sparsity)), np.full_like(n, sparsity))

    res = scan_minimize(f, math.log(lo), math.log(hi))
    n_opt = math.exp(res.x)
    return FrontierPoint(
        budget=float(budget),
        constraint="fixed_sparsity",
        constraint_value=float(sparsity),
        size_variable="total_params",
        opt_size=n_opt,
        opt_sparsity=float(sparsity),
        opt_loss=res.value,
        at_boundary=res.at_boundary,
        extrapolated=False,
        source="scaling_law",
    )


def law_optimal_sparsity(
    coeffs: ScalingLawCoeffs,
    budget: float,
    size: float,
    na_model: Callable | None = None,
    search: tuple[float, float] = (0.0, S_MAX),
) -> FrontierPoint:
    """S* at fixed compute and total size; scanned in -ln(1 - S)."""
    na = _na_or_identity(na_model)
    s_lo, s_hi = search
    if not 0.0 <= s_lo < s_hi < 1.0:
        raise ValueError(f"sparsity interval must satisfy 0 <= lo < hi < 1, got {search}")

    def f(y):
        s = -np.expm1(-y)
        n = np.full_like(s, size)
        return predict_loss(coeffs, n, budget / (6.0 * na(n, s)), s)

    res = scan_minimize(f, -math.log1p(-s_lo), -math.log1p(-s_hi))
    return FrontierPoint(
        budget=float(budget),
        constraint="fixed_size",
        constraint_value=float(size),
        size_variable="total_params",
        opt_size=float(size),
        opt_sparsity=float(-math.expm1(-res.x)),
        opt_loss=res.value,
        at_boundary=res.at_boundary,
        extrapolated=False,
        source="scaling_law",
    )
