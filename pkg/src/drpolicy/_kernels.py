"""Numba coordinate-descent kernels (Gram / covariance-update form)."""
import numpy as np
from numba import njit


@njit(cache=True)
def lasso_cd(G, c, beta, lam, tol, max_iter):
    """Cyclic coordinate descent for 0.5 b'Gb - c'b + lam*|b|_1.

    ``beta`` is updated in place (warm start). Stops once a sweep moves no
    coefficient by more than ``tol`` and the KKT violation is below ``tol``.
    Returns (sweeps, converged).
    """
    m = c.shape[0]
    q = G @ beta
    for it in range(max_iter):
        max_delta = 0.0
        for j in range(m):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = beta[j]
            rho = c[j] - q[j] + gjj * old
            if rho > lam:
                new = (rho - lam) / gjj
            elif rho < -lam:
                new = (rho + lam) / gjj
            else:
                new = 0.0
            if new != old:
                d = new - old
                for i in range(m):
                    q[i] += d * G[i, j]
                beta[j] = new
                if abs(d) > max_delta:
                    max_delta = abs(d)
        if max_delta < tol:
            viol = 0.0
            for j in range(m):
                g = c[j] - q[j]
                if beta[j] == 0.0:
                    v = abs(g) - lam
                elif beta[j] > 0.0:
                    v = abs(g - lam)
                else:
                    v = abs(g + lam)
                if v > viol:
                    viol = v
            if viol < tol:
                return it + 1, True
    return max_iter, False


@njit(cache=True)
def group_cd(G, C, W, s, tol, max_iter):
    """Block coordinate descent for ||T - Z W||_F^2 + s * sum_j ||W_j||_2.

    G = Z'Z (k x k), C = Z'T (k x d); row W_j holds the coefficients of
    context column j across all tasks. ``W`` is updated in place.
    Returns (sweeps, converged).
    """
    k, d = C.shape
    Q = G @ W
    scale = 1.0
    for j in range(k):
        for t in range(d):
            if abs(C[j, t]) > scale:
                scale = abs(C[j, t])
    u = np.empty(d)
    for it in range(max_iter):
        max_delta = 0.0
        for j in range(k):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            nrm = 0.0
            for t in range(d):
                u[t] = C[j, t] - Q[j, t] + gjj * W[j, t]
                nrm += u[t] * u[t]
            nrm = np.sqrt(nrm)
            shrink = 0.0
            if nrm > 0.0:
                shrink = 1.0 - s / (2.0 * nrm)
                if shrink < 0.0:
                    shrink = 0.0
            for t in range(d):
                new = shrink * u[t] / gjj
                delta = new - W[j, t]
                if delta != 0.0:
                    for i in range(k):
                        Q[i, t] += delta * G[i, j]
                    W[j, t] = new
                    if abs(delta) > max_delta:
                        max_delta = abs(delta)
        if max_delta < tol:
            viol = 0.0
            for j in range(k):
                wn = 0.0
                gn = 0.0
                for t in range(d):
                    wn += W[j, t] * W[j, t]
                wn = np.sqrt(wn)
                if wn == 0.0:
                    for t in range(d):
                        g = 2.0 * (C[j, t] - Q[j, t])
                        gn += g * g
                    v = np.sqrt(gn) - s
                else:
                    for t in range(d):
                        g = 2.0 * (C[j, t] - Q[j, t]) - s * W[j, t] / wn
                        gn += g * g
                    v = np.sqrt(gn)
                if v > viol:
                    viol = v
            if viol < tol * scale:
                return it + 1, True
    return max_iter, False
