import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moescale.errors import EnsembleError, InsufficientDataError, SingularFitError, SingularTransformError
from moescale.runs import RunRecord, RunTable
from moescale.surface import (
    SurfaceFit,
    bootstrap,
    cv_error,
    design_matrix,
    fit_surface,
    grid_search_degrees,
    holdout_metrics,
    inverse_transform,
    predict_loss,
    residual_sum_of_squares,
    transform_features,
)
from moescale.synth import SynthDesign, generate_runs
from moescale.validation import SURFACE_TRUTH


def _design(noise=0.0, seed=0, grid="log_even", truth=SURFACE_TRUTH):
    return SynthDesign(truth=truth, budgets=(1e20,), sizes_per_cell=12, noise_sigma=noise, noise_kind="additive", seed=seed, size_grid=grid)


def test_transform_examples():
    x, y = transform_features(1e9, 0.75)
    assert x == pytest.approx(20.7232658369, abs=1e-9)
    assert y == pytest.approx(1.3862943611, abs=1e-9)
    assert transform_features(123.0, 0.0) == (math.log(123.0), 0.0)
    x, y = transform_features(math.e, 1 - math.exp(-1))
    assert x == pytest.approx(1.0, abs=1e-15) and y == pytest.approx(1.0, abs=1e-12)


def test_transform_singular():
    with pytest.raises(SingularTransformError):
        transform_features(1e9, 1.0)


@given(st.floats(1e3, 1e15), st.floats(0.0, 0.999))
def test_transform_round_trip(n, s):
    n2, s2 = inverse_transform(*transform_features(n, s))
    assert n2 == pytest.approx(n, rel=1e-12)
    assert s2 == pytest.approx(s, rel=1e-12, abs=1e-15)


def test_design_matrix_columns():
    m = design_matrix(np.array([2.0]), np.array([3.0]), (2, 1, 2))
    assert m.tolist() == [[2.0, 4.0, 3.0, 6.0, 36.0]]


def test_noiseless_recovery():
    fit = fit_surface(generate_runs(_design()), (2, 2, 2))
    got = np.array(fit.coeffs_size + fit.coeffs_sparsity + fit.coeffs_interaction + (fit.intercept,))
    want = np.array(SURFACE_TRUTH.coeffs_size + SURFACE_TRUTH.coeffs_sparsity + SURFACE_TRUTH.coeffs_interaction + (30.0,))
    assert np.max(np.abs(got - want)) <= 1e-6
    assert holdout_metrics(fit, generate_runs(_design(seed=3, grid="log_uniform"))).mse <= 1e-10


def test_constant_loss_fit():
    t = generate_runs(_design(truth=SurfaceFit("total_params", (0, 0, 0), (), (), (), 2.75)))
    fit = fit_surface(t, (2, 2, 2))
    assert np.allclose(fit.coeffs_size + fit.coeffs_sparsity + fit.coeffs_interaction, 0.0, atol=1e-9)
    assert fit.intercept == pytest.approx(2.75, abs=1e-9)


def test_insufficient_data():
    t = generate_runs(_design())
    with pytest.raises(InsufficientDataError):
        fit_surface(t.subset(t.records[:5]), (2, 2, 2))


def test_singular_fit_names_feature():
    t = generate_runs(_design())
    one = t.subset(r for r in t if r.sparsity == 0.5)
    with pytest.raises(SingularFitError) as exc:
        fit_surface(one, (1, 1, 0))
    assert exc.value.feature is not None and "sparsity" in exc.value.feature


def test_least_squares_optimality():
    t = generate_runs(_design(noise=0.01))
    fit = fit_surface(t, (2, 2, 2))
    base = residual_sum_of_squares(fit, t)
    names = ("coeffs_size", "coeffs_sparsity", "coeffs_interaction")
    for name in names:
        vals = getattr(fit, name)
        for i in range(len(vals)):
            for eps in (1e-4, -1e-4):
                bumped = list(vals)
                bumped[i] += eps
                other = SurfaceFit(**{**fit.__dict__, name: tuple(bumped)})
                assert residual_sum_of_squares(other, t) > base


def test_predict_examples():
    hand = SurfaceFit("total_params", (2, 2, 1), (-2.0, 0.1), (-0.3, 0.05), (0.02,), 15.0)
    n, s = math.exp(20.0), -math.expm1(-2.0)
    assert predict_loss(hand, n, s).loss == pytest.approx(15.4, abs=1e-9)
    flat = SurfaceFit("total_params", (0, 0, 0), (), (), (), 3.0)
    assert predict_loss(flat, 1e9, 0.3).loss == 3.0
    with pytest.raises(SingularTransformError):
        predict_loss(flat, 1e9, 1.0)


def test_predict_interpolates_and_flags_extrapolation():
    t = generate_runs(_design())
    fit = fit_surface(t, (2, 2, 2))
    r = t[7]
    p = predict_loss(fit, r.n_total, r.sparsity)
    assert abs(p.loss - r.loss) <= 1e-9 and not p.extrapolated
    assert predict_loss(fit, 1e13, 0.5).extrapolated


def test_grid_search_examples():
    assert grid_search_degrees(generate_runs(_design(noise=0.01, seed=4)))[0] == (2, 2, 2)
    linear = SurfaceFit("total_params", (1, 0, 0), (-0.1,), (), (), 5.0)
    t = generate_runs(_design(truth=linear, noise=1e-3, seed=1))
    assert grid_search_degrees(t)[0] == (1, 0, 0)
    const = SurfaceFit("total_params", (0, 0, 0), (), (), (), 3.0)
    assert grid_search_degrees(generate_runs(_design(truth=const)))[0] == (0, 0, 0)


def test_grid_search_rules_and_determinism():
    t = generate_runs(_design(noise=0.01, seed=2))
    assert grid_search_degrees(t, seed=5) == grid_search_degrees(t, seed=5)
    deg, err = grid_search_degrees(t, rule="min", repeats=1)
    assert err == pytest.approx(cv_error(t, deg), rel=1e-12)
    with pytest.raises(ValueError):
        grid_search_degrees(t, rule="median")


def test_grid_search_all_fail():
    t = generate_runs(_design())
    one = t.subset(r for r in t if r.sparsity == 0.5)
    with pytest.raises(SingularFitError):
        grid_search_degrees(one, candidates=[(1, 1, 0), (0, 2, 0)])


def test_bootstrap_contracts():
    t = generate_runs(_design(noise=0.01))
    a = bootstrap(t, k=100, seed=7)
    b = bootstrap(t, k=100, seed=7)
    assert len(a.fits) == 100
    assert np.array_equal(a.coefficient_matrix(), b.coefficient_matrix())
    one = bootstrap(t, k=1, subsample_fraction=1.0, seed=0).fits[0]
    full = fit_surface(t, (2, 2, 2))
    assert one.coeffs_size == full.coeffs_size and one.intercept == full.intercept


def test_bootstrap_noiseless_replicas():
    t = generate_runs(_design())
    ens = bootstrap(t, k=20, seed=1)
    full = fit_surface(t, (2, 2, 2))
    ref = np.array(full.coeffs_size + full.coeffs_sparsity + full.coeffs_interaction + (full.intercept,))
    assert np.max(np.abs(ens.coefficient_matrix() - ref)) <= 1e-6


def test_bootstrap_retry_budget():
    t = generate_runs(_design())
    tiny = t.subset(t.records[:10])
    with pytest.raises(EnsembleError):
        bootstrap(tiny, (2, 2, 2), k=3, subsample_fraction=0.5, seed=0, max_retries=5)


def _recs(true, pred):
    return RunTable(tuple(RunRecord(f"r{i}", math.exp(p), math.exp(p), 0.0, 1.0, 6.0 * math.exp(p), v) for i, (p, v) in enumerate(zip(pred, true))))


def test_holdout_metric_examples():
    ident = SurfaceFit("total_params", (1, 0, 0), (1.0,), (), (), 0.0)  # predicts ln N
    xs = [1.0, 2.0, 3.0, 4.0]
    m = holdout_metrics(ident, _recs([x - 0.1 for x in xs], xs))
    assert m.mse == pytest.approx(0.01, rel=1e-12) and m.pearson_r == pytest.approx(1.0, abs=1e-12)
    m = holdout_metrics(ident, _recs([2.0, 1.0], [1.0, 2.0]))
    assert m.pearson_r == pytest.approx(-1.0, abs=1e-12)
    flat = SurfaceFit("total_params", (0, 0, 0), (), (), (), 1.0)
    m = holdout_metrics(flat, _recs([1.0, 2.0], [1.0, 2.0]))
    assert m.pearson_r is None and m.mse == pytest.approx(0.5)


def test_serialisation_round_trip():
    fit = fit_surface(generate_runs(_design()), (2, 2, 2))
    assert SurfaceFit.from_dict(fit.to_dict()) == fit
    d = fit.to_dict()
    assert d["kind"] == "isoflop_surface" and d["log_base"] == "e"
