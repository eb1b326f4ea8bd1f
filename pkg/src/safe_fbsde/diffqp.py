"""Implicit differentiation of the centralized safety QP.

For ``min 0.5 u'Ru + q'u  s.t.  Cu <= d`` with solution (u, lam), a loss
gradient ``grad_u`` is pulled back through the optimality conditions.  Only
active rows matter: with ``gamma = diag(lam) dlam`` the adjoint system is

    [[R, C_A'], [C_A, 0]] [du; gamma_A] = [-grad_u; 0]

and the data gradients follow as

    grad_q = du,  grad_d = -gamma,  grad_R = sym(du u'),
    grad_C = lam du' + gamma u'.

Rows that appear several times (mutual neighbours each contribute the same
pair row) make the system above singular; identical active rows are merged,
solved once and the class value is split evenly between the copies.  Any
split gives the same gradients with respect to the unique rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .topology import DuplicateMap, duplicate_map

log = logging.getLogger(__name__)

ACTIVE_RTOL = 1e-6
COND_LIMIT = 1e12


@dataclass
class KktSolution:
    du: np.ndarray
    dlam: np.ndarray
    gamma: np.ndarray  # diag(lam) dlam
    lam: np.ndarray
    active: np.ndarray
    degraded: bool = False


class QpGradients(NamedTuple):
    grad_R: np.ndarray
    grad_q: np.ndarray
    grad_C: np.ndarray
    grad_d: np.ndarray


def active_mask(C, d, u, rtol: float = ACTIVE_RTOL) -> np.ndarray:
    """Row k is active when its slack is within rtol (1 + |d_k|)."""
    C, d = np.asarray(C, dtype=float), np.asarray(d, dtype=float)
    if C.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    slack = d - C @ np.asarray(u, dtype=float)
    return slack <= rtol * (1.0 + np.abs(d))


def _solve(K, rhs):
    """Dense solve with a conditioning guard; returns (x, degraded)."""
    cond = np.linalg.cond(K)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        log.warning("KKT system ill-conditioned (cond=%.3g); using pseudo-inverse", cond)
        return np.linalg.pinv(K) @ rhs, True
    return np.linalg.solve(K, rhs), False


def kkt_solve(R, C, d, u, lam, grad_u, active=None, reduce: bool = True) -> KktSolution:
    """Adjoint KKT solve for the QP at (u, lam).

    ``active`` overrides the slack-based activity test.  With
    ``reduce=False`` the full system over all (merged) rows is solved
    instead, inactive rows included.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    C = np.asarray(C, dtype=float).reshape(-1, R.shape[0])
    d = np.asarray(d, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    lam = np.asarray(lam, dtype=float).reshape(-1)
    grad_u = np.asarray(grad_u, dtype=float).reshape(-1)
    n, k = u.size, d.size
    if active is None:
        active = active_mask(C, d, u)
    active = np.asarray(active, dtype=bool).reshape(-1)
    if active.size != k or lam.size != k:
        raise ValueError("lam/active must have one entry per row")

    gamma = np.zeros(k)
    dlam = np.zeros(k)
    if k == 0 or (reduce and not active.any()):
        du, degraded = _solve(R, -grad_u)
        return KktSolution(du, dlam, gamma, lam.copy(), active, degraded)

    dm = duplicate_map(C, d)
    cls = dm.row_class
    n_cls = dm.Cbar.shape[0]
    cls_active = np.zeros(n_cls, dtype=bool)
    np.logical_or.at(cls_active, cls, active)
    counts = np.bincount(cls, minlength=n_cls)
    lam_bar = np.bincount(cls, weights=lam, minlength=n_cls)

    if reduce:
        rows = np.flatnonzero(cls_active)
        Ca = dm.Cbar[rows]
        K = np.zeros((n + len(rows), n + len(rows)))
        K[:n, :n] = R
        K[:n, n:] = Ca.T
        K[n:, :n] = Ca
        rhs = np.concatenate([-grad_u, np.zeros(len(rows))])
        sol, degraded = _solve(K, rhs)
        du = sol[:n]
        gamma_bar = np.zeros(n_cls)
        gamma_bar[rows] = sol[n:]
    else:
        # [[R, C' diag(lam)], [C, diag(slack)]] [du; dlam] = [-grad_u; 0]
        Cb = dm.Cbar
        slack = dm.dbar - Cb @ u
        slack[cls_active] = 0.0
        K = np.zeros((n + n_cls, n + n_cls))
        K[:n, :n] = R
        K[:n, n:] = Cb.T * lam_bar
        K[n:, :n] = Cb
        K[n:, n:] = np.diag(-slack)
        rhs = np.concatenate([-grad_u, np.zeros(n_cls)])
        sol, degraded = _solve(K, rhs)
        du = sol[:n]
        gamma_bar = lam_bar * sol[n:]
        gamma_bar[~cls_active] = 0.0

    gamma = gamma_bar[cls] / counts[cls]
    gamma[~active] = 0.0
    nz = lam > 0
    dlam[nz] = gamma[nz] / lam[nz]
    return KktSolution(du, dlam, gamma, lam.copy(), active, degraded)


def duplicate_kkt_solve(R, C, d, u, lam, grad_u) -> KktSolution:
    """Adjoint system of the stacked problem with its duplicate rows kept.

    [[R, C' diag(lam)], [C, diag(Cu - d)]] [du; dlam] = [-grad_u; 0] is
    singular when an active row is repeated but stays consistent; the
    minimum-norm least-squares solution is one member of the solution set.
    du and the per-class sums of diag(lam) dlam are the same for every
    member, which is all the gradients need once aggregated.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = R.shape[0]
    C = np.asarray(C, dtype=float).reshape(-1, n)
    d = np.asarray(d, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    lam = np.asarray(lam, dtype=float).reshape(-1)
    k = d.size
    K = np.zeros((n + k, n + k))
    K[:n, :n] = R
    K[:n, n:] = C.T * lam
    K[n:, :n] = C
    K[n:, n:] = np.diag(np.where(lam > 0, 0.0, C @ u - d))  # rows with a multiplier sit on the boundary
    rhs = np.concatenate([-np.asarray(grad_u, dtype=float).reshape(-1), np.zeros(k)])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    dlam = sol[n:]
    return KktSolution(sol[:n], dlam, lam * dlam, lam.copy(), lam > 0)


def qp_gradients(sol: KktSolution, u) -> QpGradients:
    u = np.asarray(u, dtype=float).reshape(-1)
    du, gamma, lam = sol.du, sol.gamma, sol.lam
    grad_R = 0.5 * (np.outer(du, u) + np.outer(u, du))
    grad_C = np.outer(lam, du) + np.outer(gamma, u)
    return QpGradients(grad_R, du.copy(), grad_C, -gamma)


def aggregate_duplicates(lam_dup, gamma_dup, dmap: DuplicateMap):
    """Class sums M' lam and M' diag(lam) dlam."""
    return dmap.M.T @ np.asarray(lam_dup, dtype=float), dmap.M.T @ np.asarray(gamma_dup, dtype=float)


def reduce_gradients(grads: QpGradients, dmap: DuplicateMap) -> QpGradients:
    """Gradients w.r.t. the unique rows from those of the stacked rows."""
    return QpGradients(grads.grad_R, grads.grad_q, dmap.M.T @ grads.grad_C, dmap.M.T @ grads.grad_d)


@dataclass
class LayerCache:
    R: np.ndarray
    C: np.ndarray
    d: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    active: np.ndarray | None = None


class LayerGradients(NamedTuple):
    grad_p: np.ndarray
    grad_C: np.ndarray
    grad_d: np.ndarray
    grad_R: np.ndarray
    degraded: bool


def backprop_through_layer(cache: LayerCache, grad_u) -> LayerGradients:
    """Pull ``grad_u`` back to the QP data of one forward solve."""
    sol = kkt_solve(cache.R, cache.C, cache.d, cache.u, cache.lam, grad_u, active=cache.active)
    g = qp_gradients(sol, cache.u)
    return LayerGradients(g.grad_q, g.grad_C, g.grad_d, g.grad_R, sol.degraded)
