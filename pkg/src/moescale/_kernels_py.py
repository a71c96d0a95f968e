"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Parameter layout (moe form, 10 entries):
    [log_a, log_b, log_c, log_d, log_e, alpha, beta, gamma, lambda, delta]
Dense form uses the first five slots as [log_a, log_b, log_e, alpha, beta].
"""

from __future__ import annotations

import numpy as np


def _terms(theta, ln_n, ln_d, ln_1ms, moe):
    if moe:
        la, lb, lc, ld, le, alpha, beta, gamma, lam, delta = theta
        t = np.empty((5, ln_n.shape[0]))
        t[0] = la - alpha * ln_n
        t[1] = lb - beta * ln_d
        t[2] = lc - lam * ln_1ms
        t[3] = ld - delta * ln_1ms - gamma * ln_n
        t[4] = le
    else:
        la, lb, le, alpha, beta = theta
        t = np.empty((3, ln_n.shape[0]))
        t[0] = la - alpha * ln_n
        t[1] = lb - beta * ln_d
        t[2] = le
    return t


def law_log_predict(theta, ln_n, ln_d, ln_1ms, moe=True):
    """ln of the predicted loss, via log-sum-exp of the additive terms."""
    t = _terms(np.asarray(theta, dtype=float), ln_n, ln_d, ln_1ms, moe)
    m = t.max(axis=0)
    return m + np.log(np.exp(t - m).sum(axis=0))


def law_objective_grad(theta, ln_n, ln_d, ln_1ms, target, huber_delta, moe=True, log_space=True):
    """Summed Huber loss of the residuals and its gradient w.r.t. ``theta``.

    ``target`` holds ln(observed loss) when ``log_space`` is set, otherwise
    the raw observed loss.
    """
    theta = np.asarray(theta, dtype=float)
    t = _terms(theta, ln_n, ln_d, ln_1ms, moe)
    m = t.max(axis=0)
    e = np.exp(t - m)
    s = e.sum(axis=0)
    lse = m + np.log(s)
    w = e / s
    if log_space:
        r = lse - target
        scale = None
    else:
        pred = np.exp(lse)
        r = pred - target
        scale = pred
    abs_r = np.abs(r)
    quad = abs_r <= huber_delta
    f = float(np.sum(np.where(quad, 0.5 * r * r, huber_delta * (abs_r - 0.5 * huber_delta))))
    dr = np.where(quad, r, huber_delta * np.sign(r))
    if scale is not None:
        dr = dr * scale
    g = np.empty_like(theta)
    if moe:
        g[0] = dr @ w[0]
        g[1] = dr @ w[1]
        g[2] = dr @ w[2]
        g[3] = dr @ w[3]
        g[4] = dr @ w[4]
        g[5] = -(dr * w[0]) @ ln_n
        g[6] = -(dr * w[1]) @ ln_d
        g[7] = -(dr * w[3]) @ ln_n
        g[8] = -(dr * w[2]) @ ln_1ms
        g[9] = -(dr * w[3]) @ ln_1ms
    else:
        g[0] = dr @ w[0]
        g[1] = dr @ w[1]
        g[2] = dr @ w[2]
        g[3] = -(dr * w[0]) @ ln_n
        g[4] = -(dr * w[1]) @ ln_d
    return f, g


def lbfgs_law(theta0, ln_n, ln_d, ln_1ms, target, huber_delta, moe=True, log_space=True, m=10,
              max_iter=500, grad_tol=1e-8, c1=1e-4, c2=0.9, max_linesearch=40, max_restarts=1):
    """L-BFGS on the law objective; same return tuple as the compiled version."""
    from moescale.errors import OptimizerError
    from moescale.lbfgs import LbfgsOptions, lbfgs_minimize

    opts = LbfgsOptions(m=m, max_iter=max_iter, grad_tol=grad_tol, c1=c1, c2=c2,
                        max_linesearch=max_linesearch, max_restarts=max_restarts)

    def fun(theta):
        return law_objective_grad(theta, ln_n, ln_d, ln_1ms, target, huber_delta, moe, log_space)

    try:
        x, rep = lbfgs_minimize(fun, theta0, opts)
    except OptimizerError as exc:
        rep = getattr(exc, "report", None)
        if rep is None:
            x = np.asarray(theta0, dtype=float)
            return x, float("inf"), float("nan"), 0, 0, 0, 3
        return exc.last_x, rep.final_value, rep.final_gradient_norm, rep.iterations, rep.line_search_evals, rep.history_size, 2
    status = 0 if rep.converged else 1
    return x, rep.final_value, rep.final_gradient_norm, rep.iterations, rep.line_search_evals, rep.history_size, status
