# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the parametric-law fit; ``_kernels_py`` is the reference implementation."""

import numpy as np

from libc.math cimport exp, log, fabs


cdef inline double _huber(double r, double delta, double* dr) nogil:
    cdef double a = fabs(r)
    if a <= delta:
        dr[0] = r
        return 0.5 * r * r
    dr[0] = delta if r > 0 else -delta
    return delta * (a - 0.5 * delta)


def law_log_predict(theta, double[::1] ln_n, double[::1] ln_d, double[::1] ln_1ms, bint moe=True):
    cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef Py_ssize_t n = ln_n.shape[0], i, j, k
    cdef double t[5]
    cdef double m, s
    out = np.empty(n)
    cdef double[::1] o = out
    k = 5 if moe else 3
    with nogil:
        for i in range(n):
            if moe:
                t[0] = th[0] - th[5] * ln_n[i]
                t[1] = th[1] - th[6] * ln_d[i]
                t[2] = th[2] - th[8] * ln_1ms[i]
                t[3] = th[3] - th[9] * ln_1ms[i] - th[7] * ln_n[i]
                t[4] = th[4]
            else:
                t[0] = th[0] - th[3] * ln_n[i]
                t[1] = th[1] - th[4] * ln_d[i]
                t[2] = th[2]
            m = t[0]
            for j in range(1, k):
                if t[j] > m:
                    m = t[j]
            s = 0.0
            for j in range(k):
                s += exp(t[j] - m)
            o[i] = m + log(s)
    return out


def law_objective_grad(theta, double[::1] ln_n, double[::1] ln_d, double[::1] ln_1ms,
                       double[::1] target, double huber_delta, bint moe=True, bint log_space=True):
    cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef Py_ssize_t n = ln_n.shape[0], i, j, k
    cdef double t[5]
    cdef double w[5]
    cdef double g[10]
    cdef double m, s, lse, r, dr, f = 0.0
    k = 5 if moe else 3
    for j in range(10):
        g[j] = 0.0
    with nogil:
        for i in range(n):
            if moe:
                t[0] = th[0] - th[5] * ln_n[i]
                t[1] = th[1] - th[6] * ln_d[i]
                t[2] = th[2] - th[8] * ln_1ms[i]
                t[3] = th[3] - th[9] * ln_1ms[i] - th[7] * ln_n[i]
                t[4] = th[4]
            else:
                t[0] = th[0] - th[3] * ln_n[i]
                t[1] = th[1] - th[4] * ln_d[i]
                t[2] = th[2]
            m = t[0]
            for j in range(1, k):
                if t[j] > m:
                    m = t[j]
            s = 0.0
            for j in range(k):
                w[j] = exp(t[j] - m)
                s += w[j]
            lse = m + log(s)
            for j in range(k):
                w[j] /= s
            if log_space:
                r = lse - target[i]
                f += _huber(r, huber_delta, &dr)
            else:
                r = exp(lse) - target[i]
                f += _huber(r, huber_delta, &dr)
                dr *= exp(lse)
            if moe:
                g[0] += dr * w[0]
                g[1] += dr * w[1]
                g[2] += dr * w[2]
                g[3] += dr * w[3]
                g[4] += dr * w[4]
                g[5] -= dr * w[0] * ln_n[i]
                g[6] -= dr * w[1] * ln_d[i]
                g[7] -= dr * w[3] * ln_n[i]
                g[8] -= dr * w[2] * ln_1ms[i]
                g[9] -= dr * w[3] * ln_1ms[i]
            else:
                g[0] += dr * w[0]
                g[1] += dr * w[1]
                g[2] += dr * w[2]
                g[3] -= dr * w[0] * ln_n[i]
                g[4] -= dr * w[1] * ln_d[i]
    grad = np.empty(10 if moe else 5)
    for j in range(grad.shape[0]):
        grad[j] = g[j]
    return f, grad


# ---------------------------------------------------------------------------
# L-BFGS specialised to the law objective; mirrors moescale.lbfgs step for step.

DEF MAXDIM = 10
DEF MAXHIST = 64

from libc.math cimport sqrt, isfinite, copysign, INFINITY, NAN


cdef struct LawProblem:
    double* ln_n
    double* ln_d
    double* ln_1ms
    double* target
    Py_ssize_t n
    double delta
    bint moe
    bint log_space
    int dim
    int evals


cdef double _eval(LawProblem* P, double* th, double* g) nogil:
    cdef Py_ssize_t i
    cdef int j, k
    cdef double t[5]
    cdef double w[5]
    cdef double m, s, lse, r, dr, f = 0.0
    k = 5 if P.moe else 3
    P.evals += 1
    for j in range(P.dim):
        g[j] = 0.0
    for i in range(P.n):
        if P.moe:
            t[0] = th[0] - th[5] * P.ln_n[i]
            t[1] = th[1] - th[6] * P.ln_d[i]
            t[2] = th[2] - th[8] * P.ln_1ms[i]
            t[3] = th[3] - th[9] * P.ln_1ms[i] - th[7] * P.ln_n[i]
            t[4] = th[4]
        else:
            t[0] = th[0] - th[3] * P.ln_n[i]
            t[1] = th[1] - th[4] * P.ln_d[i]
            t[2] = th[2]
        m = t[0]
        for j in range(1, k):
            if t[j] > m:
                m = t[j]
        s = 0.0
        for j in range(k):
            w[j] = exp(t[j] - m)
            s += w[j]
        lse = m + log(s)
        for j in range(k):
            w[j] /= s
        if P.log_space:
            r = lse - P.target[i]
            f += _huber(r, P.delta, &dr)
        else:
            r = exp(lse) - P.target[i]
            f += _huber(r, P.delta, &dr)
            dr *= exp(lse)
        if P.moe:
            g[0] += dr * w[0]
            g[1] += dr * w[1]
            g[2] += dr * w[2]
            g[3] += dr * w[3]
            g[4] += dr * w[4]
            g[5] -= dr * w[0] * P.ln_n[i]
            g[6] -= dr * w[1] * P.ln_d[i]
            g[7] -= dr * w[3] * P.ln_n[i]
            g[8] -= dr * w[2] * P.ln_1ms[i]
            g[9] -= dr * w[3] * P.ln_1ms[i]
        else:
            g[0] += dr * w[0]
            g[1] += dr * w[1]
            g[2] += dr * w[2]
            g[3] -= dr * w[0] * P.ln_n[i]
            g[4] -= dr * w[1] * P.ln_d[i]
    return f


cdef inline double _dot(double* a, double* b, int n) nogil:
    cdef double s = 0.0
    cdef int j
    for j in range(n):
        s += a[j] * b[j]
    return s


cdef inline bint _all_finite(double* a, int n) nogil:
    cdef int j
    for j in range(n):
        if not isfinite(a[j]):
            return False
    return True


cdef int _cubic_min(double a, double fa, double ga, double b, double fb, double gb, double* out) nogil:
    cdef double d1, disc, d2, denom, t
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0.0:
        return 0
    d2 = copysign(sqrt(disc), b - a)
    denom = gb - ga + 2.0 * d2
    if denom == 0.0:
        return 0
    t = b - (b - a) * (gb + d2 - d1) / denom
    if not isfinite(t):
        return 0
    out[0] = t
    return 1


cdef double _phi(LawProblem* P, double* x, double* p, double a, double* xt, double* g, double* d) nogil:
    cdef int j
    cdef double f
    for j in range(P.dim):
        xt[j] = x[j] + a * p[j]
    f = _eval(P, xt, g)
    if not (isfinite(f) and _all_finite(g, P.dim)):
        d[0] = NAN
        return INFINITY
    d[0] = _dot(g, p, P.dim)
    return f


cdef int _strong_wolfe(LawProblem* P, double* x, double f0, double* g0, double* p, double step,
                       double c1, double c2, int max_evals,
                       double* a_out, double* f_out, double* g_out, int* evals_out) nogil:
    """Returns 1 on success, 0 on failure."""
    cdef int dim = P.dim, j, evals = 0, ok
    cdef double d0 = _dot(g0, p, dim)
    cdef double xt[MAXDIM]
    cdef double g[MAXDIM]
    cdef double g_prev[MAXDIM]
    cdef double g_lo[MAXDIM]
    cdef double a_prev = 0.0, f_prev = f0, d_prev = d0
    cdef double a = step, f, d
    cdef double lo, f_lo, d_lo, hi, f_hi, d_hi, left, right, margin, at
    cdef bint bracketed = False
    evals_out[0] = 0
    if not d0 < 0.0:
        return 0
    for j in range(dim):
        g_prev[j] = g0[j]
    while evals < max_evals:
        f = _phi(P, x, p, a, xt, g, &d)
        evals += 1
        if f > f0 + c1 * a * d0 or (a_prev > 0.0 and f >= f_prev):
            lo = a_prev; f_lo = f_prev; d_lo = d_prev
            for j in range(dim):
                g_lo[j] = g_prev[j]
            hi = a; f_hi = f; d_hi = d
            bracketed = True
            break
        if fabs(d) <= -c2 * d0:
            a_out[0] = a; f_out[0] = f
            for j in range(dim):
                g_out[j] = g[j]
            evals_out[0] = evals
            return 1
        if d >= 0.0:
            lo = a; f_lo = f; d_lo = d
            for j in range(dim):
                g_lo[j] = g[j]
            hi = a_prev; f_hi = f_prev; d_hi = d_prev
            bracketed = True
            break
        a_prev = a; f_prev = f; d_prev = d
        for j in range(dim):
            g_prev[j] = g[j]
        a *= 2.0
    if not bracketed:
        evals_out[0] = evals
        return 0
    # zoom
    while evals < max_evals:
        ok = 0
        if isfinite(f_hi) and isfinite(d_hi):
            ok = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi, &at)
        left = lo if lo < hi else hi
        right = hi if lo < hi else lo
        margin = 0.1 * (right - left)
        if not ok or not (left + margin <= at and at <= right - margin):
            at = 0.5 * (lo + hi)
        if at == lo or at == hi:
            break
        f = _phi(P, x, p, at, xt, g, &d)
        evals += 1
        if f > f0 + c1 * at * d0 or f >= f_lo:
            hi = at; f_hi = f; d_hi = d
        else:
            if fabs(d) <= -c2 * d0:
                a_out[0] = at; f_out[0] = f
                for j in range(dim):
                    g_out[j] = g[j]
                evals_out[0] = evals
                return 1
            if d * (hi - lo) >= 0.0:
                hi = lo; f_hi = f_lo; d_hi = d_lo
            lo = at; f_lo = f; d_lo = d
            for j in range(dim):
                g_lo[j] = g[j]
    evals_out[0] = evals
    if lo > 0.0 and f_lo < f0:
        a_out[0] = lo; f_out[0] = f_lo
        for j in range(dim):
            g_out[j] = g_lo[j]
        return 1
    return 0


def lbfgs_law(theta0, double[::1] ln_n, double[::1] ln_d, double[::1] ln_1ms, double[::1] target,
              double huber_delta, bint moe=True, bint log_space=True, int m=10, int max_iter=500,
              double grad_tol=1e-8, double c1=1e-4, double c2=0.9, int max_linesearch=40,
              int max_restarts=1):
    """Minimise the summed Huber law objective from ``theta0``.

    Returns (x, f, gnorm, iterations, line_search_evals, history_size, status)
    with status 0 = converged, 1 = iteration limit, 2 = line search failed,
    3 = not finite at the start.
    """
    cdef LawProblem P
    cdef int dim = 10 if moe else 5
    cdef double x[MAXDIM]
    cdef double g[MAXDIM]
    cdef double q[MAXDIM]
    cdef double xn[MAXDIM]
    cdef double gn[MAXDIM]
    cdef double S[MAXHIST][MAXDIM]
    cdef double Y[MAXHIST][MAXDIM]
    cdef double rho[MAXHIST]
    cdef double alph[MAXHIST]
    cdef int head = 0, count = 0, it = 0, failures = 0, ls_evals = 0, ev, status, j, h, idx
    cdef double f, fn, gnorm, step, t, sy, yy, b, a
    cdef double[::1] th = np.ascontiguousarray(theta0, dtype=np.float64)
    if th.shape[0] != dim:
        raise ValueError(f"theta0 must have {dim} entries")
    if m < 1 or m > MAXHIST:
        raise ValueError(f"history size must lie in 1..{MAXHIST}")
    P.ln_n = &ln_n[0]
    P.ln_d = &ln_d[0]
    P.ln_1ms = &ln_1ms[0]
    P.target = &target[0]
    P.n = ln_n.shape[0]
    P.delta = huber_delta
    P.moe = moe
    P.log_space = log_space
    P.dim = dim
    P.evals = 0
    for j in range(dim):
        x[j] = th[j]
    with nogil:
        f = _eval(&P, x, g)
        if not (isfinite(f) and _all_finite(g, dim)):
            status = 3
            gnorm = NAN
        else:
            status = -1
            gnorm = sqrt(_dot(g, g, dim))
            while gnorm > grad_tol and it < max_iter:
                for j in range(dim):
                    q[j] = -g[j]
                # newest pair sits at (head - 1) mod m
                for h in range(count):
                    idx = (head - 1 - h + m) % m
                    a = rho[idx] * _dot(S[idx], q, dim)
                    alph[h] = a
                    for j in range(dim):
                        q[j] -= a * Y[idx][j]
                if count > 0:
                    idx = (head - 1 + m) % m
                    t = _dot(S[idx], Y[idx], dim) / _dot(Y[idx], Y[idx], dim)
                    for j in range(dim):
                        q[j] *= t
                for h in range(count - 1, -1, -1):
                    idx = (head - 1 - h + m) % m
                    b = rho[idx] * _dot(Y[idx], q, dim)
                    for j in range(dim):
                        q[j] += (alph[h] - b) * S[idx][j]
                step = 1.0 if count > 0 else (1.0 if gnorm <= 1.0 else 1.0 / gnorm)
                if not _strong_wolfe(&P, x, f, g, q, step, c1, c2, max_linesearch, &t, &fn, gn, &ev):
                    failures += 1
                    if failures > max_restarts or count == 0:
                        status = 2
                        break
                    count = 0
                    head = 0
                    continue
                ls_evals += ev
                failures = 0
                for j in range(dim):
                    xn[j] = x[j] + t * q[j]
                sy = 0.0
                yy = 0.0
                for j in range(dim):
                    S[head][j] = xn[j] - x[j]
                    Y[head][j] = gn[j] - g[j]
                    sy += S[head][j] * Y[head][j]
                    yy += Y[head][j] * Y[head][j]
                if sy > 1e-12 * yy and sy > 0.0:
                    rho[head] = 1.0 / sy
                    head = (head + 1) % m
                    if count < m:
                        count += 1
                for j in range(dim):
                    x[j] = xn[j]
                    g[j] = gn[j]
                f = fn
                gnorm = sqrt(_dot(g, g, dim))
                it += 1
            if status == -1:
                status = 0 if gnorm <= grad_tol else 1
    out = np.empty(dim)
    for j in range(dim):
        out[j] = x[j]
    return out, f, gnorm, it, ls_evals, count, status
