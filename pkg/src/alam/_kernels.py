"""Inner loops of the tabular solvers.

Each kernel has an ``@njit`` loop version and a vectorized numpy version
with identical arguments. ``ALAM_DISABLE_NUMBA=1`` (or a missing numba)
selects the numpy path at import time.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("ALAM_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# projected_gradient(Q, b, A, c, lam, rho, lo, hi, u0, step, tol, max_iter):
#   minimizes 1/2 u'Qu - b'u + 1/(2 rho) |max(0, lam + rho (Au - c))|^2 over the box
#   with a fixed step; stops when the gradient-mapping norm reaches tol.
#   Returns (u, residual, iterations).
# hildreth(P, q, diag, mu0, tol, max_sweeps):
#   projected coordinate descent on 1/2 mu'P mu - q'mu over mu >= 0.
#   Returns (mu, last max coordinate change, sweeps).


def _pg_numpy(Q, b, A, c, lam, rho, lo, hi, u0, step, tol, max_iter):
    u = np.clip(u0.copy(), lo, hi)
    for it in range(max_iter):
        mult = np.maximum(lam + rho * (A @ u - c), 0.0)
        g = Q @ u - b + A.T @ mult
        u_new = np.clip(u - step * g, lo, hi)
        res = np.sqrt(np.sum((u_new - u) ** 2)) / step
        u = u_new
        if res <= tol:
            return u, res, it + 1
    return u, res, max_iter


def _hildreth_numpy(P, q, diag, mu0, tol, max_sweeps):
    mu = mu0.copy()
    w = P @ mu
    m = mu.size
    for sweep in range(max_sweeps):
        delta_max = 0.0
        for j in range(m):
            new = max(0.0, mu[j] - (w[j] - q[j]) / diag[j])
            d = new - mu[j]
            if d != 0.0:
                w += d * P[:, j]
                mu[j] = new
                delta_max = max(delta_max, abs(d))
        if delta_max <= tol:
            return mu, delta_max, sweep + 1
    return mu, delta_max, max_sweeps


if HAVE_NUMBA:

    @njit(cache=True)
    def _pg_loops(Q, b, A, c, lam, rho, lo, hi, u0, step, tol, max_iter):
        n = u0.size
        m = c.size
        u = np.empty(n)
        for i in range(n):
            u[i] = min(max(u0[i], lo[i]), hi[i])
        mult = np.empty(m)
        g = np.empty(n)
        res = np.inf
        for it in range(max_iter):
            for r in range(m):
                s = -c[r]
                for i in range(n):
                    s += A[r, i] * u[i]
                mult[r] = max(lam[r] + rho * s, 0.0)
            for i in range(n):
                s = -b[i]
                for j in range(n):
                    s += Q[i, j] * u[j]
                for r in range(m):
                    s += A[r, i] * mult[r]
                g[i] = s
            sq = 0.0
            for i in range(n):
                new = min(max(u[i] - step * g[i], lo[i]), hi[i])
                d = new - u[i]
                sq += d * d
                u[i] = new
            res = np.sqrt(sq) / step
            if res <= tol:
                return u, res, it + 1
        return u, res, max_iter

    @njit(cache=True)
    def _hildreth_loops(P, q, diag, mu0, tol, max_sweeps):
        m = mu0.size
        mu = mu0.copy()
        w = np.zeros(m)
        for i in range(m):
            s = 0.0
            for j in range(m):
                s += P[i, j] * mu[j]
            w[i] = s
        delta_max = np.inf
        for sweep in range(max_sweeps):
            delta_max = 0.0
            for j in range(m):
                new = max(0.0, mu[j] - (w[j] - q[j]) / diag[j])
                d = new - mu[j]
                if d != 0.0:
                    for i in range(m):
                        w[i] += d * P[i, j]
                    mu[j] = new
                    if abs(d) > delta_max:
                        delta_max = abs(d)
            if delta_max <= tol:
                return mu, delta_max, sweep + 1
        return mu, delta_max, max_sweeps

    projected_gradient = _pg_loops
    hildreth = _hildreth_loops
else:
    projected_gradient = _pg_numpy
    hildreth = _hildreth_numpy

BACKEND = "numba" if HAVE_NUMBA else "numpy"
