"""Compiled pieces of the Laplace-approximated mixed logistic likelihood.

Random effects enter as ``b_k = L u_k`` with ``u_k ~ N(0, I)`` and ``L`` the
lower Cholesky factor of the random-effect covariance.  Per group the
integrand ``exp(l_k(u) - |u|^2 / 2)`` is maximized by damped Newton and
replaced by its Laplace approximation

    log L_k ~= l_k(u_hat) - |u_hat|^2 / 2 - log det(A_k) / 2,
    A_k = I + sum_i w_i M_i M_i^T,   M_i = L^T z_i,   w_i = m_i p_i (1 - p_i).

The gradient accounts for the dependence of ``A_k`` on ``u_hat`` through
implicit differentiation of the inner optimum.
"""

from __future__ import annotations

import math

import numba
import numpy as np

NEWTON_MAX = 100
NEWTON_TOL = 1e-20


@numba.njit(cache=True)
def expit(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True)
def expit_softplus(x):
    """``(expit(x), softplus(x))`` from a single exponential."""
    if x >= 0:
        e = math.exp(-x)
        return 1.0 / (1.0 + e), x + math.log1p(e)
    e = math.exp(x)
    return e / (1.0 + e), math.log1p(e)


@numba.njit(cache=True)
def build_L(theta, q, diag_only):
    L = np.zeros((q, q))
    if diag_only:
        for a in range(q):
            L[a, a] = math.exp(theta[a])
    else:
        idx = 0
        for a in range(q):
            for b in range(a + 1):
                L[a, b] = math.exp(theta[idx]) if a == b else theta[idx]
                idx += 1
    return L


@numba.njit(cache=True)
def _chol(A):
    q = A.shape[0]
    C = np.zeros((q, q))
    for j in range(q):
        s = A[j, j]
        for k in range(j):
            s -= C[j, k] * C[j, k]
        C[j, j] = math.sqrt(s)
        for i in range(j + 1, q):
            s = A[i, j]
            for k in range(j):
                s -= C[i, k] * C[j, k]
            C[i, j] = s / C[j, j]
    return C


@numba.njit(cache=True)
def _chol_solve(C, b):
    q = C.shape[0]
    y = np.empty(q)
    for i in range(q):
        s = b[i]
        for k in range(i):
            s -= C[i, k] * y[k]
        y[i] = s / C[i, i]
    x = np.empty(q)
    for i in range(q - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, q):
            s -= C[k, i] * x[k]
        x[i] = s / C[i, i]
    return x


@numba.njit(cache=True)
def _chol_inv(C):
    q = C.shape[0]
    inv = np.empty((q, q))
    e = np.zeros(q)
    for j in range(q):
        e[:] = 0.0
        e[j] = 1.0
        inv[:, j] = _chol_solve(C, e)
    return inv


@numba.njit(cache=True)
def _group_state(u, eta0, M, y, m, s, e, q, A, grad):
    """Fill A and grad at u for rows s..e; return the penalized log-likelihood."""
    for a in range(q):
        grad[a] = -u[a]
        for b in range(q):
            A[a, b] = 1.0 if a == b else 0.0
    val = 0.0
    for a in range(q):
        val -= 0.5 * u[a] * u[a]
    for i in range(s, e):
        eta = eta0[i]
        for a in range(q):
            eta += M[i, a] * u[a]
        p, sp = expit_softplus(eta)
        val += y[i] * eta - m[i] * sp
        r = y[i] - m[i] * p
        w = m[i] * p * (1.0 - p)
        for a in range(q):
            grad[a] += r * M[i, a]
            wa = w * M[i, a]
            for b in range(a + 1):
                A[a, b] += wa * M[i, b]
    for a in range(q):
        for b in range(a):
            A[b, a] = A[a, b]
    return val


@numba.njit(cache=True)
def inner_mode(u, eta0, M, y, m, s, e, q, A, grad):
    """Damped Newton for one group's mode, updating ``u`` in place.

    On return ``A`` and ``grad`` hold the state at the final ``u``.
    Returns ``(converged, penalized log-likelihood at u)``.
    """
    A2 = np.empty((q, q))
    grad2 = np.empty(q)
    trial = np.empty(q)
    val = _group_state(u, eta0, M, y, m, s, e, q, A, grad)
    for it in range(NEWTON_MAX):
        C = _chol(A)
        step = _chol_solve(C, grad)
        dec = 0.0
        for a in range(q):
            dec += grad[a] * step[a]
        if dec < NEWTON_TOL:
            return True, val
        t = 1.0
        accepted = False
        for _ in range(60):
            for a in range(q):
                trial[a] = u[a] + t * step[a]
            v2 = _group_state(trial, eta0, M, y, m, s, e, q, A2, grad2)
            if v2 >= val - 1e-13 * abs(val):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return dec < 1e-12, val
        val = v2
        for a in range(q):
            u[a] = trial[a]
            grad[a] = grad2[a]
            for b in range(q):
                A[a, b] = A2[a, b]
    return False, val


@numba.njit(cache=True)
def laplace_loglik(beta, theta, X, zcols, y, m, starts, U, diag_only, want_grad):
    """Laplace log-likelihood (without binomial constants) and its gradient.

    ``U`` holds one row of standardized modes per group and is used as the
    Newton warm start; it is overwritten with the new modes.
    Returns ``(value, grad_beta, grad_theta, n_failed_groups)``.
    """
    n, p = X.shape
    q = zcols.shape[0]
    K = starts.shape[0] - 1
    L = build_L(theta, q, diag_only)
    eta0 = X @ beta
    M = np.zeros((n, q))
    for i in range(n):
        for b in range(q):
            acc = 0.0
            for a in range(b, q):
                acc += L[a, b] * X[i, zcols[a]]
            M[i, b] = acc
    total = 0.0
    g_beta = np.zeros(p)
    g_L = np.zeros((q, q))
    failed = 0
    A = np.empty((q, q))
    grad = np.empty(q)
    for k in range(K):
        s, e = starts[k], starts[k + 1]
        u = U[k]
        ok, val = inner_mode(u, eta0, M, y, m, s, e, q, A, grad)
        if not ok:
            failed += 1
        C = _chol(A)
        logdet = 0.0
        for a in range(q):
            logdet += 2.0 * math.log(C[a, a])
        total += val - 0.5 * logdet
        if not want_grad:
            continue
        Ainv = _chol_inv(C)
        S_cM = np.zeros(q)
        S_rz = np.zeros(q)
        S_cz = np.zeros(q)
        S_wzM = np.zeros((q, q))
        S_wMx = np.zeros((q, p))
        AinvM = np.empty(q)
        for i in range(s, e):
            eta = eta0[i]
            for a in range(q):
                eta += M[i, a] * u[a]
            pr = expit(eta)
            r = y[i] - m[i] * pr
            w = m[i] * pr * (1.0 - pr)
            h = 0.0
            for a in range(q):
                acc = 0.0
                for b in range(q):
                    acc += Ainv[a, b] * M[i, b]
                AinvM[a] = acc
                h += M[i, a] * acc
            c = w * (1.0 - 2.0 * pr) * h
            for j in range(p):
                g_beta[j] += (r - 0.5 * c) * X[i, j]
            for a in range(q):
                S_cM[a] += c * M[i, a]
                zia = X[i, zcols[a]]
                S_rz[a] += r * zia
                S_cz[a] += c * zia
                for b in range(q):
                    S_wzM[a, b] += w * zia * M[i, b]
                wm = w * M[i, a]
                for j in range(p):
                    S_wMx[a, j] += wm * X[i, j]
        v = Ainv @ S_cM
        for j in range(p):
            acc = 0.0
            for a in range(q):
                acc += S_wMx[a, j] * v[a]
            g_beta[j] += 0.5 * acc
        P = S_wzM @ Ainv
        G = np.empty(q)
        for a in range(q):
            for b in range(a + 1):
                if diag_only and a != b:
                    continue
                for c2 in range(q):
                    G[c2] = -u[b] * S_wzM[a, c2]
                G[b] += S_rz[a]
                vg = 0.0
                for c2 in range(q):
                    vg += v[c2] * G[c2]
                g_L[a, b] += u[b] * S_rz[a] - 0.5 * (u[b] * S_cz[a] + vg + 2.0 * P[a, b])
    if diag_only:
        g_theta = np.empty(q)
        for a in range(q):
            g_theta[a] = g_L[a, a] * L[a, a]
    else:
        g_theta = np.empty(q * (q + 1) // 2)
        idx = 0
        for a in range(q):
            for b in range(a + 1):
                g_theta[idx] = g_L[a, b] * L[a, a] if a == b else g_L[a, b]
                idx += 1
    return total, g_beta, g_theta, failed
