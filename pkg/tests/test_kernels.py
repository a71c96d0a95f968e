import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moescale import _kernels_py, kernels
from moescale.paramlaw import HUBER_DELTA, LawData, ScalingLawCoeffs
from moescale.synth import SynthDesign, generate_runs

compiled = pytest.importorskip("moescale._kernels")

PUBLISHED = ScalingLawCoeffs.published_estimate()
DATA = LawData.from_table(
    generate_runs(SynthDesign(truth=PUBLISHED, budgets=(3e19, 1e21), sparsities=(0.0, 0.5, 0.9), sizes_per_cell=5, noise_sigma=0.02))
)
TARGET = np.log(DATA.loss)
FEATS = (DATA.ln_n, DATA.ln_d, DATA.ln_1ms)


def test_default_backend_is_compiled():
    assert kernels.BACKEND == "cython"


def test_env_forces_fallback():
    env = {**os.environ, "MOESCALE_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", "from moescale import kernels; print(kernels.BACKEND)"], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@given(st.lists(st.floats(-0.5, 0.5), min_size=10, max_size=10), st.booleans(), st.booleans())
def test_objective_parity(shift, moe, log_space):
    theta = PUBLISHED.vector() + np.array(shift)
    if not moe:
        theta = theta[[0, 1, 4, 5, 6]]
    target = TARGET if log_space else DATA.loss
    fc, gc = compiled.law_objective_grad(theta, *FEATS, target, HUBER_DELTA, moe, log_space)
    fp, gp = _kernels_py.law_objective_grad(theta, *FEATS, target, HUBER_DELTA, moe, log_space)
    assert fc == pytest.approx(fp, rel=1e-10)
    np.testing.assert_allclose(gc, gp, rtol=1e-9, atol=1e-12)


def test_prediction_parity():
    theta = PUBLISHED.vector()
    np.testing.assert_allclose(compiled.law_log_predict(theta, *FEATS, True), _kernels_py.law_log_predict(theta, *FEATS, True), rtol=1e-13)


def test_lbfgs_parity():
    x0 = PUBLISHED.vector() + 0.1
    # identical steps early on; the problem is ill conditioned, so rounding paths
    # drift apart later, but both land on the same minimum
    rc = compiled.lbfgs_law(x0, *FEATS, TARGET, HUBER_DELTA, True, True, 10, 10)
    rp = _kernels_py.lbfgs_law(x0, *FEATS, TARGET, HUBER_DELTA, True, True, 10, 10)
    assert rc[1] == pytest.approx(rp[1], rel=1e-12)
    assert rc[3:] == rp[3:]
    rc = compiled.lbfgs_law(x0, *FEATS, TARGET, HUBER_DELTA, True, True, 10, 5000)
    rp = _kernels_py.lbfgs_law(x0, *FEATS, TARGET, HUBER_DELTA, True, True, 10, 5000)
    assert rc[6] == rp[6] == 0
    assert rc[1] == pytest.approx(rp[1], rel=1e-5)
