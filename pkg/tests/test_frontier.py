import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moescale.errors import EvaluationError, InsufficientDataError
from moescale.frontier import (
    S_MAX,
    approach2_fit,
    brute_force_argmin,
    optimal_size_given_sparsity,
    optimal_sparsity_given_size,
    optimal_sparsity_map,
    power_law_fit,
    scaling_exponent_vs_sparsity,
    scan_minimize,
)
from moescale.runs import RunRecord, RunTable, group_by_budget
from moescale.surface import SurfaceFit, fit_surface, transform_features
from moescale.synth import SynthDesign, generate_runs
from moescale.validation import SURFACE_TRUTH

WIDE = (1e6, 1e12)


def _size_bowl(shift=0.0):
    # 2 + (x - 20)^2 = 402 - 40x + x^2
    return SurfaceFit("total_params", (2, 0, 0), (-40.0, 1.0), (), (), 402.0 + shift)


def _sparsity_bowl():
    return SurfaceFit("total_params", (0, 2, 0), (), (-0.2, 0.05), (), 3.0)


def test_size_vertex():
    p = optimal_size_given_sparsity(_size_bowl(), 0.5, WIDE)
    assert p.opt_size == pytest.approx(math.exp(20.0), rel=1e-9)
    assert p.opt_loss == pytest.approx(2.0, abs=1e-12) and not p.at_boundary


def test_size_monotone_hits_upper_edge():
    fit = SurfaceFit("total_params", (1, 0, 0), (-0.1,), (), (), 5.0)
    p = optimal_size_given_sparsity(fit, 0.0, WIDE)
    assert p.at_boundary and p.opt_size == pytest.approx(1e12, rel=1e-12)


def test_sparsity_vertex():
    p = optimal_sparsity_given_size(_sparsity_bowl(), 1e9)
    assert p.opt_sparsity == pytest.approx(1 - math.exp(-2), abs=1e-9)
    assert not p.at_boundary


def test_sparsity_boundaries():
    down = SurfaceFit("total_params", (0, 1, 0), (), (-0.1,), (), 3.0)
    p = optimal_sparsity_given_size(down, 1e9)
    assert p.at_boundary and p.opt_sparsity == pytest.approx(S_MAX, abs=1e-12)
    up = SurfaceFit("total_params", (0, 1, 0), (), (0.1,), (), 3.0)
    p = optimal_sparsity_given_size(up, 1e9)
    assert p.at_boundary and p.opt_sparsity == 0.0


def test_bad_intervals():
    with pytest.raises(ValueError):
        optimal_sparsity_given_size(_sparsity_bowl(), 1e9, (0.5, 1.0))
    with pytest.raises(ValueError):
        optimal_size_given_sparsity(_size_bowl(), 0.5, (0.0, 1e9))
    with pytest.raises(ValueError):
        optimal_size_given_sparsity(_size_bowl(), 0.5)  # no fit_domain


def test_non_finite_objective():
    with pytest.raises(EvaluationError):
        with np.errstate(invalid="ignore"):
            scan_minimize(lambda x: np.log(x), -1.0, 1.0)


@given(st.floats(-3.0, 3.0), st.floats(0.1, 5.0), st.floats(-5.0, 5.0))
def test_scan_matches_brute_force(c, k, shift):
    f = lambda x: k * (x - c) ** 2 + shift
    res = scan_minimize(f, -4.0, 4.0, poly=np.array([k * c * c + shift, -2 * k * c, k]))
    bx, step = brute_force_argmin(f, -4.0, 4.0)
    assert abs(res.x - bx) <= step
    assert res.x == pytest.approx(c, abs=1e-9)


@given(st.floats(-5.0, 5.0))
def test_size_argmin_shift_invariant(shift):
    a = optimal_size_given_sparsity(_size_bowl(), 0.3, WIDE)
    b = optimal_size_given_sparsity(_size_bowl(shift), 0.3, WIDE)
    assert a.opt_size == pytest.approx(b.opt_size, rel=1e-9)
    assert b.opt_loss == pytest.approx(a.opt_loss + shift, abs=1e-9)


@given(st.floats(0.5, 3.0))
def test_scale_equivariance(lam):
    a = optimal_size_given_sparsity(_size_bowl(), 0.3, WIDE)
    scaled = SurfaceFit("total_params", (2, 0, 0), (-40.0 * lam, lam), (), (), 402.0 * lam)
    b = optimal_size_given_sparsity(scaled, 0.3, WIDE)
    assert b.opt_size == pytest.approx(a.opt_size, rel=1e-9)
    assert b.opt_loss == pytest.approx(lam * a.opt_loss, rel=1e-9)


def _slice(points):
    return RunTable(tuple(RunRecord(f"r{i}", n, n, 0.5, 1.0, 6.0 * n, l) for i, (n, l) in enumerate(points)))


def test_approach2_exact_vertex():
    xs = [18.0, 19.0, 20.5, 21.0, 23.0]
    q = approach2_fit(_slice([(math.exp(x), 2 + (x - 20) ** 2) for x in xs]))
    assert q.is_minimum and q.vertex_size == pytest.approx(math.exp(20.0), rel=1e-9)


def test_approach2_degenerate():
    q = approach2_fit(_slice([(math.exp(x), 1.0 + 0.5 * x) for x in (1.0, 2.0, 3.0, 4.0)]))
    assert not q.is_minimum
    with pytest.raises(InsufficientDataError):
        approach2_fit(_slice([(1e8, 1.0), (1e9, 2.0), (1e9, 2.1)]))


def test_approach2_agrees_with_surface():
    design = SynthDesign(truth=SURFACE_TRUTH, budgets=(1e20,), sparsities=(0.5,), sizes_per_cell=40, size_span=(1e7, 1e11))
    t = generate_runs(design)
    q = approach2_fit(t)
    p = optimal_size_given_sparsity(SURFACE_TRUTH, 0.5, (1e7, 1e11))
    step = (math.log(1e11) - math.log(1e7)) / 1023
    assert abs(math.log(q.vertex_size) - math.log(p.opt_size)) <= step


def test_power_law_examples():
    law = power_law_fit([(1e19, 1e9), (1e21, 1e10)])
    assert law.exponent == pytest.approx(0.5, abs=1e-12)
    xs = np.logspace(1, 5, 5)
    law = power_law_fit(zip(xs, 3 * xs**0.7))
    assert law.exponent == pytest.approx(0.7, abs=1e-9) and law.prefactor == pytest.approx(3.0, rel=1e-6)
    assert power_law_fit([(1.0, 2.0), (10.0, 2.0)]).exponent == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        power_law_fit([(1.0, -2.0), (10.0, 2.0)])
    with pytest.raises(InsufficientDataError):
        power_law_fit([(1.0, 2.0)])


@given(st.floats(-2.0, 2.0), st.floats(1e-3, 1e3))
def test_power_law_recovers_generator(a, k):
    xs = np.logspace(18, 22, 7)
    law = power_law_fit(zip(xs, k * xs**a))
    assert law.exponent == pytest.approx(a, abs=1e-9)


def test_map_single_cell_and_order():
    fit = SurfaceFit("total_params", (0, 2, 0), (), (-0.2, 0.05), (), 3.0, budget=1e20)
    rows = optimal_sparsity_map([fit], [1e9])
    assert len(rows) == 1
    assert rows[0].opt_sparsity == optimal_sparsity_given_size(fit, 1e9).opt_sparsity
    other = SurfaceFit(**{**fit.__dict__, "budget": 1e19})
    rows = optimal_sparsity_map([fit, other], [1e10, 1e9])
    assert [(r.budget, r.size) for r in rows] == [(1e19, 1e9), (1e19, 1e10), (1e20, 1e9), (1e20, 1e10)]


def test_map_rejects_active_surfaces():
    fit = SurfaceFit("active_params", (0, 2, 0), (), (-0.2, 0.05), (), 3.0)
    with pytest.raises(ValueError):
        optimal_sparsity_map([fit], [1e9])


def _sqrt_frontier_table(budgets, sparsities, k=3e-2):
    # per (C, S) a parabola in ln N with vertex at N* = k * C^0.5
    recs = []
    for c in budgets:
        for s in sparsities:
            v = math.log(k * math.sqrt(c))
            for j, dx in enumerate((-1.0, -0.5, 0.0, 0.5, 1.0)):
                n = math.exp(v + dx)
                recs.append(RunRecord(f"{c}-{s}-{j}", n, n * (1 - s), s, c / (6 * n * (1 - s)), c, 2.0 + (1 + s) * dx * dx))
    return RunTable(tuple(recs))


def test_exponent_vs_sparsity_oracle():
    t = _sqrt_frontier_table([3e19, 1e20, 1e21], [0.0, 0.5, 0.9])
    grouped = group_by_budget(t).groups
    rows = scaling_exponent_vs_sparsity(grouped, [0.0, 0.5, 0.9])
    assert [r.sparsity for r in rows] == [0.0, 0.5, 0.9]
    for r in rows:
        assert r.exponent == pytest.approx(0.5, abs=1e-9) and r.n_budgets == 3


def test_exponent_single_budget():
    t = _sqrt_frontier_table([1e20], [0.0, 0.5])
    rows = scaling_exponent_vs_sparsity(dict(group_by_budget(t).groups), [0.0, 0.5])
    assert all(r.exponent is None and "only 1" in r.reason for r in rows)


def test_fitted_surface_frontier_tracks_truth():
    design = SynthDesign(truth=SURFACE_TRUTH, budgets=(1e20,), sizes_per_cell=12)
    fit = fit_surface(generate_runs(design), (2, 2, 2))
    for s in (0.0, 0.5, 0.9):
        a = optimal_size_given_sparsity(fit, s)
        b = optimal_size_given_sparsity(SURFACE_TRUTH, s, (a.opt_size / 100, a.opt_size * 100))
        assert a.opt_size == pytest.approx(b.opt_size, rel=1e-4)
