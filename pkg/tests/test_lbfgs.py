import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moescale.errors import OptimizerError
from moescale.lbfgs import LbfgsOptions, lbfgs_minimize, strong_wolfe
from moescale.validation import rosenbrock


def quad(a):
    a = np.asarray(a, dtype=float)

    def f(x):
        return float(0.5 * np.sum(a * x * x)), a * x

    return f


@pytest.mark.parametrize("dim", [2, 10])
def test_rosenbrock(dim):
    x0 = np.full(dim, -1.2)
    x0[1::2] = 1.0
    x, rep = lbfgs_minimize(rosenbrock, x0, LbfgsOptions(max_iter=1000, grad_tol=1e-6))
    assert rep.converged and rep.iterations <= 1000 and rep.final_gradient_norm <= 1e-6
    assert np.allclose(x, 1.0, atol=1e-5)


def test_zero_iterations_at_minimum():
    x, rep = lbfgs_minimize(quad([1.0, 2.0]), np.zeros(2))
    assert rep.iterations == 0 and rep.converged and np.array_equal(x, np.zeros(2))


def test_history_bounded():
    _, rep = lbfgs_minimize(rosenbrock, np.full(10, -1.0), LbfgsOptions(m=3, max_iter=1000))
    assert rep.history_size <= 3


def test_iteration_cap_reported():
    _, rep = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), LbfgsOptions(max_iter=3))
    assert not rep.converged and rep.iterations == 3


def test_non_finite_start():
    def bad(x):
        return math.nan, np.zeros_like(x)

    with pytest.raises(OptimizerError):
        lbfgs_minimize(bad, np.zeros(2))


@given(st.lists(st.floats(0.1, 100.0), min_size=1, max_size=8), st.integers(0, 2**31))
def test_convex_quadratic_converges(diag, seed):
    x0 = np.random.default_rng(seed).normal(size=len(diag)) * 10
    x, rep = lbfgs_minimize(quad(diag), x0, LbfgsOptions(grad_tol=1e-9))
    assert rep.converged and np.max(np.abs(x)) <= 1e-7


def test_strong_wolfe_conditions():
    f = quad([1.0, 10.0])
    x = np.array([3.0, -2.0])
    f0, g0 = f(x)
    p = -g0
    out = strong_wolfe(f, x, f0, g0, p, 1.0)
    a, fa, ga = out[0], out[1], out[2]
    assert fa <= f0 + 1e-4 * a * (g0 @ p)
    assert abs(ga @ p) <= 0.9 * abs(g0 @ p)
