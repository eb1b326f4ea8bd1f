"""Compiled per-instance merged CADMM-OSQP loop.

Same iteration, residuals and penalty rule as the array engine in
``solver``; the array engine pays numpy call overhead on every tiny
operation, so training uses this version.  Message phases are implicit:
phase 1 is the scatter into ``g`` and phase 2 the gather into ``gt``.
"""

import numpy as np
from numba import njit

PENALTY_MIN, PENALTY_MAX = 1e-6, 1e6


@njit(cache=True)
def _factor(R, A, rho, mu, m, Kinv):
    N, K, mt = A.shape
    n = mt + K
    M = np.zeros((n, n))
    for i in range(N):
        M[:, :] = 0.0
        for a in range(m):
            for c in range(m):
                M[a, c] = R[i, a, c]
        for a in range(mt):
            M[a, a] += mu
        for k in range(K):
            for c in range(mt):
                M[c, mt + k] = A[i, k, c]
                M[mt + k, c] = A[i, k, c]
            M[mt + k, mt + k] = -1.0 / rho
        Kinv[i] = np.linalg.inv(M)


@njit(cache=True)
def _ratio(r_pri, k_pri, r_dual, k_dual):
    if r_pri <= 0.0 or r_dual <= 0.0:
        return 1.0
    tiny = 1e-30
    return np.sqrt((r_pri / max(k_pri, tiny)) / (r_dual / max(k_dual, tiny)))


@njit(cache=True)
def admm_batch(A, d, R, p, idx, counts, u, z, zhat, y, xi, g, rho, mu, run,
               eps_abs, eps_rel, max_iters, adapt, adapt_every, adapt_factor,
               iters, converged, report):
    B, N, K, mt = A.shape
    m = p.shape[2]
    L = idx.shape[2]
    n = mt + K
    Kinv = np.empty((N, n, n))
    rhs = np.empty(n)
    gt = np.empty((N, mt))
    gt_prev = np.empty((N, mt))
    for b in range(B):
        if not run[b]:
            continue
        _factor(R[b], A[b], rho[b], mu[b], m, Kinv)
        for i in range(N):
            for l in range(L):
                for c in range(m):
                    gt[i, l * m + c] = g[b, idx[b, i, l], c]
        for it in range(1, max_iters + 1):
            r_b, m_b = rho[b], mu[b]
            # block 1
            for i in range(N):
                for c in range(mt):
                    pc = p[b, i, c] if c < m else 0.0
                    rhs[c] = -pc + m_b * gt[i, c] - xi[b, i, c]
                for k in range(K):
                    rhs[mt + k] = zhat[b, i, k] - y[b, i, k] / r_b
                for c in range(mt):
                    s = 0.0
                    for q in range(n):
                        s += Kinv[i, c, q] * rhs[q]
                    u[b, i, c] = s
                for k in range(K):
                    s = 0.0
                    for q in range(n):
                        s += Kinv[i, mt + k, q] * rhs[q]
                    z[b, i, k] = rhs[mt + k] + s / r_b
            # block 2: projection, then phase-1 scatter into the averages
            for j in range(N):
                for c in range(m):
                    g[b, j, c] = 0.0
            for i in range(N):
                for l in range(L):
                    j = idx[b, i, l]
                    for c in range(m):
                        g[b, j, c] += u[b, i, l * m + c] + xi[b, i, l * m + c] / m_b
            for j in range(N):
                for c in range(m):
                    g[b, j, c] /= counts[b, j]
            # phase 2 gather, duals
            for i in range(N):
                for c in range(mt):
                    gt_prev[i, c] = gt[i, c]
                for l in range(L):
                    for c in range(m):
                        gt[i, l * m + c] = g[b, idx[b, i, l], c]
                for k in range(K):
                    v = z[b, i, k] + y[b, i, k] / r_b
                    if v >= d[b, i, k]:
                        zhat[b, i, k] = d[b, i, k]
                        y[b, i, k] = y[b, i, k] + r_b * (z[b, i, k] - d[b, i, k])
                    else:
                        zhat[b, i, k] = v
                        y[b, i, k] = 0.0
                for c in range(mt):
                    xi[b, i, c] += m_b * (u[b, i, c] - gt[i, c])
            # residuals
            rp1 = rp2 = rd1 = rd2 = 0.0
            kp1 = kp2 = kd1 = kx = 0.0
            for i in range(N):
                for k in range(K):
                    s = 0.0
                    for c in range(mt):
                        s += A[b, i, k, c] * u[b, i, c]
                    rp1 = max(rp1, abs(s - zhat[b, i, k]))
                    kp1 = max(kp1, abs(s), abs(zhat[b, i, k]))
                for c in range(mt):
                    rp2 = max(rp2, abs(u[b, i, c] - gt[i, c]))
                    kp2 = max(kp2, abs(u[b, i, c]), abs(gt[i, c]))
                    rd2 = max(rd2, abs(m_b * (gt[i, c] - gt_prev[i, c])))
                    kx = max(kx, abs(xi[b, i, c]))
                    ru = 0.0
                    if c < m:
                        for a in range(m):
                            ru += R[b, i, c, a] * u[b, i, a]
                        kd1 = max(kd1, abs(p[b, i, c]))
                    aty = 0.0
                    for k in range(K):
                        aty += A[b, i, k, c] * y[b, i, k]
                    lin = ru + aty + xi[b, i, c]
                    if c < m:
                        lin += p[b, i, c]
                    rd1 = max(rd1, abs(lin))
                    kd1 = max(kd1, abs(ru), abs(aty), abs(xi[b, i, c]))
            report[b, 0] = rp1
            report[b, 1] = rp2
            report[b, 2] = rd1
            report[b, 3] = rd2
            report[b, 4] = eps_abs + eps_rel * kp1
            report[b, 5] = eps_abs + eps_rel * kp2
            report[b, 6] = eps_abs + eps_rel * kd1
            report[b, 7] = eps_abs + eps_rel * kx
            iters[b] = it
            if rp1 <= report[b, 4] and rp2 <= report[b, 5] and rd1 <= report[b, 6] and rd2 <= report[b, 7]:
                converged[b] = True
                break
            if adapt and it % adapt_every == 0:
                new_rho = min(max(r_b * _ratio(rp1, kp1, rd1, kd1), PENALTY_MIN), PENALTY_MAX)
                new_mu = min(max(m_b * _ratio(rp2, kp2, rd2, max(kx, kd1)), PENALTY_MIN), PENALTY_MAX)
                changed = False
                if new_rho > r_b * adapt_factor or new_rho < r_b / adapt_factor:
                    rho[b] = new_rho
                    changed = True
                if new_mu > m_b * adapt_factor or new_mu < m_b / adapt_factor:
                    mu[b] = new_mu
                    changed = True
                if changed:
                    _factor(R[b], A[b], rho[b], mu[b], m, Kinv)
