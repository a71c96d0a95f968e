"""IsoFLOP surfaces: polynomial loss models over log size and log-sparsity.

A surface at a fixed compute budget is

    L = sum_i a_i x^i + sum_i b_i y^i + sum_i c_i (x*y)^i + d

with ``x = ln N`` and ``y = -ln(1 - S)``. Coefficients are found by least
squares through a QR factorisation of the standardised design matrix.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Literal, NamedTuple, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from moescale.errors import (
    EnsembleError,
    InsufficientDataError,
    SingularFitError,
    SingularTransformError,
)
from moescale.runs import RunTable

SizeVariable = Literal["total_params", "active_params"]
SIZE_COLUMNS = {"total_params": "n_total", "active_params": "n_active"}
MAX_DEGREE = 4
CV_FOLDS = 5
# Relative pivot size below which a design column counts as collapsed.
RANK_TOL = 1e-10


def transform_features(size, sparsity):
    """Map (size, sparsity) to (ln size, -ln(1 - sparsity))."""
    size = np.asarray(size, dtype=float)
    sparsity = np.asarray(sparsity, dtype=float)
    if np.any(size <= 0):
        raise ValueError("size must be positive")
    if np.any(sparsity >= 1.0) or np.any(sparsity < 0.0):
        raise SingularTransformError("sparsity must lie in [0, 1); the log transform is singular at 1")
    x = np.log(size)
    y = -np.log1p(-sparsity)
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def inverse_transform(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    size, sparsity = np.exp(x), -np.expm1(-y)
    if size.ndim == 0:
        return float(size), float(sparsity)
    return size, sparsity


def _feature_names(degrees: tuple[int, int, int]) -> list[str]:
    a1, a2, a3 = degrees
    return (
        [f"ln_size^{i}" for i in range(1, a1 + 1)]
        + [f"log_sparsity^{i}" for i in range(1, a2 + 1)]
        + [f"interaction^{i}" for i in range(1, a3 + 1)]
    )


def design_matrix(x: np.ndarray, y: np.ndarray, degrees: tuple[int, int, int]) -> np.ndarray:
    """Columns [x^i, y^i, (x*y)^i] without the intercept."""
    a1, a2, a3 = degrees
    xy = x * y
    cols = [x**i for i in range(1, a1 + 1)]
    cols += [y**i for i in range(1, a2 + 1)]
    cols += [xy**i for i in range(1, a3 + 1)]
    if not cols:
        return np.empty((len(x), 0))
    return np.column_stack(cols)


@dataclass(frozen=True)
class SurfaceFit:
    size_variable: SizeVariable
    degrees: tuple[int, int, int]
    coeffs_size: tuple[float, ...]
    coeffs_sparsity: tuple[float, ...]
    coeffs_interaction: tuple[float, ...]
    intercept: float
    budget: float | None = None
    fit_domain: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        a1, a2, a3 = self.degrees
        if (len(self.coeffs_size), len(self.coeffs_sparsity), len(self.coeffs_interaction)) != (a1, a2, a3):
            raise ValueError("coefficient list lengths must match degrees")

    def evaluate(self, x, y):
        """Polynomial value at already-transformed features."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.full(np.broadcast(x, y).shape, self.intercept, dtype=float)
        xy = x * y
        for i, a in enumerate(self.coeffs_size, start=1):
            out = out + a * x**i
        for i, b in enumerate(self.coeffs_sparsity, start=1):
            out = out + b * y**i
        for i, c in enumerate(self.coeffs_interaction, start=1):
            out = out + c * xy**i
        return out if out.ndim else float(out)

    def poly_in_size(self, y: float) -> np.ndarray:
        """Ascending coefficients of L as a polynomial in x at fixed y."""
        n = max(len(self.coeffs_size), len(self.coeffs_interaction)) + 1
        p = np.zeros(n)
        p[0] = self.intercept + sum(b * y**i for i, b in enumerate(self.coeffs_sparsity, start=1))
        for i, a in enumerate(self.coeffs_size, start=1):
            p[i] += a
        for i, c in enumerate(self.coeffs_interaction, start=1):
            p[i] += c * y**i
        return p

    def poly_in_sparsity(self, x: float) -> np.ndarray:
        """Ascending coefficients of L as a polynomial in y at fixed x."""
        n = max(len(self.coeffs_sparsity), len(self.coeffs_interaction)) + 1
        p = np.zeros(n)
        p[0] = self.intercept + sum(a * x**i for i, a in enumerate(self.coeffs_size, start=1))
        for i, b in enumerate(self.coeffs_sparsity, start=1):
            p[i] += b
        for i, c in enumerate(self.coeffs_interaction, start=1):
            p[i] += c * x**i
        return p

    def in_domain(self, size: float, sparsity: float) -> bool:
        dom = self.fit_domain
        if not dom:
            return True
        return (
            dom["size_min"] <= size <= dom["size_max"]
            and dom["sparsity_min"] <= sparsity <= dom["sparsity_max"]
        )

    def to_dict(self) -> dict:
        return {
            "kind": "isoflop_surface",
            "size_variable": self.size_variable,
            "degrees": list(self.degrees),
            "coefficients": {
                "size": list(self.coeffs_size),
                "sparsity": list(self.coeffs_sparsity),
                "interaction": list(self.coeffs_interaction),
            },
            "intercept": self.intercept,
            "budget": self.budget,
            "fit_domain": dict(self.fit_domain),
            "log_base": "e",
            "metrics": dict(self.metrics),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SurfaceFit":
        if data.get("kind") != "isoflop_surface":
            raise ValueError(f"not an isoflop_surface artifact (kind={data.get('kind')!r})")
        if data.get("log_base", "e") != "e":
            raise ValueError("only natural-log surfaces are supported")
        coeffs = data["coefficients"]
        return cls(
            size_variable=data["size_variable"],
            degrees=tuple(int(d) for d in data["degrees"]),
            coeffs_size=tuple(float(v) for v in coeffs["size"]),
            coeffs_sparsity=tuple(float(v) for v in coeffs["sparsity"]),
            coeffs_interaction=tuple(float(v) for v in coeffs["interaction"]),
            intercept=float(data["intercept"]),
            budget=None if data.get("budget") is None else float(data["budget"]),
            fit_domain=dict(data.get("fit_domain") or {}),
            metrics=dict(data.get("metrics") or {}),
        )


def _columns(records: RunTable, size_variable: SizeVariable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if size_variable not in SIZE_COLUMNS:
        raise ValueError(f"size_variable must be one of {sorted(SIZE_COLUMNS)}, got {size_variable!r}")
    size = records.column(SIZE_COLUMNS[size_variable])
    sparsity = records.column("sparsity")
    loss = records.column("loss")
    return size, sparsity, loss


def _solve(x: np.ndarray, y: np.ndarray, loss: np.ndarray, degrees: tuple[int, int, int]):
    """Least-squares coefficients (feature coefficients, intercept)."""
    names = _feature_names(degrees)
    n_coef = len(names) + 1
    if len(loss) < n_coef:
        raise InsufficientDataError(
            f"{len(loss)} records cannot determine {n_coef} coefficients for degrees {degrees}"
        )
    X = design_matrix(x, y, degrees)
    y_mean = loss.mean()
    if X.shape[1] == 0:
        return np.empty(0), float(y_mean)
    mu = X.mean(axis=0)
    sigma = X.std(axis=0)
    scale = np.maximum(np.abs(mu), 1.0)
    for j, name in enumerate(names):
        if sigma[j] <= RANK_TOL * scale[j]:
            raise SingularFitError(f"feature {name} is constant over the records", feature=name)
    Z = (X - mu) / sigma
    Q, R = np.linalg.qr(Z, mode="reduced")
    diag = np.abs(np.diag(R))
    if diag.min() <= RANK_TOL * diag.max():
        j = int(np.argmin(diag))
        raise SingularFitError(f"design is rank deficient; feature {names[j]} is collinear", feature=names[j])
    beta_z = solve_triangular(R, Q.T @ (loss - y_mean))
    beta = beta_z / sigma
    intercept = float(y_mean - beta @ mu)
    return beta, intercept


def fit_surface(
    records: RunTable,
    degrees: tuple[int, int, int] = (2, 2, 2),
    size_variable: SizeVariable = "total_params",
    budget: float | None = None,
) -> SurfaceFit:
    degrees = tuple(int(d) for d in degrees)
    if len(degrees) != 3 or any(d < 0 or d > MAX_DEGREE for d in degrees):
        raise ValueError(f"degrees must be three integers in 0..{MAX_DEGREE}, got {degrees}")
    size, sparsity, loss = _columns(records, size_variable)
    x, y = transform_features(size, sparsity)
    x, y = np.atleast_1d(x), np.atleast_1d(y)
    beta, intercept = _solve(x, y, loss, degrees)
    a1, a2, _ = degrees
    if budget is None and len(records):
        budget = float(np.exp(np.mean(np.log(records.column("compute")))))
    fit = SurfaceFit(
        size_variable=size_variable,
        degrees=degrees,
        coeffs_size=tuple(float(v) for v in beta[:a1]),
        coeffs_sparsity=tuple(float(v) for v in beta[a1 : a1 + a2]),
        coeffs_interaction=tuple(float(v) for v in beta[a1 + a2 :]),
        intercept=intercept,
        budget=budget,
        fit_domain={
            "size_min": float(size.min()),
            "size_max": float(size.max()),
            "sparsity_min": float(sparsity.min()),
            "sparsity_max": float(sparsity.max()),
        },
    )
    resid = fit.evaluate(x, y) - loss
    return replace(fit, metrics={"train_mse": float(np.mean(resid**2)), "n_records": len(loss)})


def residual_sum_of_squares(fit: SurfaceFit, records: RunTable) -> float:
    size, sparsity, loss = _columns(records, fit.size_variable)
    x, y = transform_features(size, sparsity)
    return float(np.sum((fit.evaluate(x, y) - loss) ** 2))


class Prediction(NamedTuple):
    loss: float
    extrapolated: bool


def predict_loss(fit: SurfaceFit, size: float, sparsity: float) -> Prediction:
    x, y = transform_features(size, sparsity)
    return Prediction(float(fit.evaluate(x, y)), not fit.in_domain(size, sparsity))


def _fold_ids(n: int, k: int, seed: int) -> np.ndarray:
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=int)
    folds[perm] = np.arange(n) % k
    return folds


def cv_squared_errors(
    records: RunTable,
    degrees: tuple[int, int, int],
    size_variable: SizeVariable = "total_params",
    k: int = CV_FOLDS,
    seed: int = 0,
) -> np.ndarray:
    """Held-out squared error of every record under seeded k-fold CV."""
    size, sparsity, loss = _columns(records, size_variable)
    x, y = transform_features(size, sparsity)
    x, y = np.atleast_1d(x), np.atleast_1d(y)
    folds = _fold_ids(len(loss), k, seed)
    sq = np.empty(len(loss))
    for f in range(k):
        test = folds == f
        beta, intercept = _solve(x[~test], y[~test], loss[~test], degrees)
        pred = design_matrix(x[test], y[test], degrees) @ beta + intercept
        sq[test] = (pred - loss[test]) ** 2
    return sq


def cv_error(
    records: RunTable,
    degrees: tuple[int, int, int],
    size_variable: SizeVariable = "total_params",
    k: int = CV_FOLDS,
    seed: int = 0,
) -> float:
    """Mean squared k-fold cross-validation error."""
    return float(cv_squared_errors(records, degrees, size_variable, k, seed).mean())


def candidate_degrees(max_degree: int = MAX_DEGREE) -> list[tuple[int, int, int]]:
    return list(itertools.product(range(max_degree + 1), repeat=3))


def grid_search_degrees(
    records: RunTable,
    size_variable: SizeVariable = "total_params",
    *,
    max_degree: int = MAX_DEGREE,
    k: int = CV_FOLDS,
    seed: int = 0,
    rule: Literal["one_se", "min"] = "one_se",
    repeats: int = 3,
    candidates: Sequence[tuple[int, int, int]] | None = None,
    map_fn=map,
) -> tuple[tuple[int, int, int], float]:
    """Degree triple chosen by k-fold cross validation.

    With ``rule="min"`` only exact CV-error ties are broken by parsimony.
    The default ``"one_se"`` treats every candidate whose CV error is within
    one standard error (over records) of the best as tied. Ties go to the
    lowest total degree, then lexicographic order. Candidates that cannot be
    fitted on some fold are skipped. Per-record errors are averaged over
    ``repeats`` independent fold shuffles (fold seeds ``seed*1000 + r``).
    """
    if rule not in ("one_se", "min"):
        raise ValueError(f"unknown selection rule {rule!r}")
    candidates = list(candidates) if candidates is not None else candidate_degrees(max_degree)
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    results = list(map_fn(_cv_or_none, [(records, d, size_variable, k, seed, repeats) for d in candidates]))
    scored = [(float(sq.mean()), d, sq) for sq, d in zip(results, candidates) if sq is not None]
    if not scored:
        raise SingularFitError("no degree candidate could be fitted")
    best_err, _, best_sq = min(scored, key=lambda t: (t[0], sum(t[1]), t[1]))
    threshold = best_err
    if rule == "one_se" and len(best_sq) > 1:
        threshold += float(np.std(best_sq, ddof=1)) / math.sqrt(len(best_sq))
    tied = [(sum(d), d, err) for err, d, _ in scored if err <= threshold]
    _, degrees, err = min(tied)
    return degrees, err


def _cv_or_none(args) -> np.ndarray | None:
    records, degrees, size_variable, k, seed, repeats = args
    try:
        return sum(
            cv_squared_errors(records, degrees, size_variable, k, seed * 1000 + r) for r in range(repeats)
        ) / repeats
    except (SingularFitError, InsufficientDataError):
        return None


@dataclass(frozen=True)
class FitEnsemble:
    fits: tuple[SurfaceFit, ...]
    seed: int
    subsample_fraction: float

    def coefficient_matrix(self) -> np.ndarray:
        return np.array(
            [list(f.coeffs_size) + list(f.coeffs_sparsity) + list(f.coeffs_interaction) + [f.intercept] for f in self.fits]
        )


def bootstrap(
    records: RunTable,
    degrees: tuple[int, int, int] = (2, 2, 2),
    size_variable: SizeVariable = "total_params",
    k: int = 100,
    subsample_fraction: float = 0.8,
    seed: int = 0,
    max_retries: int | None = None,
) -> FitEnsemble:
    """Refit on ``k`` random subsamples drawn without replacement."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 < subsample_fraction <= 1.0:
        raise ValueError("subsample_fraction must lie in (0, 1]")
    n = len(records)
    m = max(1, int(round(subsample_fraction * n)))
    rng = np.random.default_rng(seed)
    budget = max_retries if max_retries is not None else 10 * k
    fits: list[SurfaceFit] = []
    failures = 0
    while len(fits) < k:
        idx = np.sort(rng.choice(n, size=m, replace=False))
        sub = records.subset(records.records[i] for i in idx)
        try:
            fits.append(fit_surface(sub, degrees, size_variable, budget=None))
        except (SingularFitError, InsufficientDataError) as exc:
            failures += 1
            if failures > budget:
                raise EnsembleError(f"{failures} subsamples failed to fit; last error: {exc}") from exc
    return FitEnsemble(fits=tuple(fits), seed=seed, subsample_fraction=subsample_fraction)


class HoldoutMetrics(NamedTuple):
    mse: float
    pearson_r: float | None


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    a = np.asarray(a, dtype=float) - np.mean(a)
    b = np.asarray(b, dtype=float) - np.mean(b)
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        return None
    return float(a @ b) / denom


def holdout_metrics(fit: SurfaceFit, holdout: RunTable) -> HoldoutMetrics:
    """MSE and Pearson r between observed and predicted holdout losses.

    ``pearson_r`` is None when predictions (or observations) are constant.
    """
    if len(holdout) == 0:
        raise InsufficientDataError("holdout table is empty")
    size, sparsity, loss = _columns(holdout, fit.size_variable)
    x, y = transform_features(size, sparsity)
    pred = np.atleast_1d(fit.evaluate(x, y))
    return HoldoutMetrics(float(np.mean((pred - loss) ** 2)), pearson(loss, pred))


def surface_grid(fit: SurfaceFit, sizes: Sequence[float], sparsities: Sequence[float]) -> list[dict]:
    """Long-form (size, sparsity, predicted loss) rows for plotting."""
    rows = []
    for s in sparsities:
        for n in sizes:
            pred = predict_loss(fit, n, s)
            rows.append({"size": float(n), "sparsity": float(s), "loss": pred.loss, "extrapolated": pred.extrapolated})
    return rows
