"""Random instance suites behind ``solve-check`` and ``grad-check``.

The failure-bound experiment drives one agent at an obstacle through a
single-row safety filter and compares its empirical exit rate with the
analytic bound.  Solver instances come from real barrier geometry with the right-hand sides
lifted so a random control is strictly feasible.  Gradient instances are
built backwards from a chosen KKT point (active set, multipliers, slacks), so
their solution is known exactly and every multiplier and inactive slack is
bounded away from zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import diffqp
from ..barriers import BarrierParams, failure_bound, obstacle_row, obstacle_values
from ..dynamics import CONTROL_DIM, step_arrays
from ..solver import VERIFY_CONFIG, DecentralizedProblem, SolverConfig, solve_centralized_oracle, solve_decentralized
from ..topology import DuplicateMap, assemble_duplicate, assemble_local, build_neighborhoods, duplicate_map

MARGIN = 0.1  # lower bound on active multipliers and inactive slacks


@dataclass
class SolverInstance:
    problem: DecentralizedProblem
    C: np.ndarray
    d: np.ndarray
    R: np.ndarray
    p: np.ndarray
    dmap: DuplicateMap


def random_solver_instance(rng: np.random.Generator, params: BarrierParams = BarrierParams(),
                           r_agent: float = 0.2, r_obstacle: float = 0.3, sigma: float = 0.1) -> SolverInstance:
    """N in 2..5, r in 1..N-1, 0-2 obstacles, strictly feasible by construction."""
    N = int(rng.integers(2, 6))
    r = int(rng.integers(1, N))
    n_obs = int(rng.integers(0, 3))
    states = np.zeros((N, 4))
    states[:, :2] = rng.uniform(-2, 2, (N, 2))
    states[:, 2] = rng.uniform(-np.pi, np.pi, N)
    states[:, 3] = rng.uniform(-1, 1, N)
    obstacles = rng.uniform(-2, 2, (n_obs, 2))
    radii = np.full(n_obs, r_obstacle)
    hoods = build_neighborhoods(states, r)
    local = [assemble_local(h, states, obstacles, params, r_agent=r_agent, obstacle_radii=radii, sigma=sigma)
             for h in hoods]
    # lift d so that u0 has slack >= MARGIN; copies of a shared row see the
    # same u0 entries and stay identical
    u0 = rng.normal(size=(N, CONTROL_DIM))
    for lc in local:
        ut = np.concatenate([u0[c] for c in lc.columns])
        lc.d = np.maximum(lc.d, lc.A @ ut + MARGIN)
    C, d, dmap = assemble_duplicate(local, N, r)
    R_i = np.eye(CONTROL_DIM)
    p = 3.0 * rng.normal(size=(N, CONTROL_DIM))
    prob = DecentralizedProblem(np.broadcast_to(R_i, (N, CONTROL_DIM, CONTROL_DIM)), p,
                                np.stack([lc.A for lc in local]), np.stack([lc.d for lc in local]),
                                np.array([h.neighbors for h in hoods]))
    return SolverInstance(prob, C, d, np.kron(np.eye(N), R_i), p.reshape(-1), dmap)


@dataclass
class SolverSuiteReport:
    n_instances: int
    max_err: float
    mean_err: float
    max_iters: int
    mean_iters: float
    unconverged: int
    n_active: int  # instances with at least one active row
    seconds: float

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_err <= tol


def run_solver_suite(n_instances: int = 200, seed: int = 0, config: SolverConfig = VERIFY_CONFIG) -> SolverSuiteReport:
    """Decentralized solve against the active-set oracle on random instances."""
    rng = np.random.default_rng(seed)
    errs, iters, unconv, active = [], [], 0, 0
    t0 = time.perf_counter()
    for _ in range(n_instances):
        inst = random_solver_instance(rng)
        res = solve_decentralized(inst.problem, config)
        ref = solve_centralized_oracle(inst.C, inst.d, inst.R, inst.p)
        errs.append(float(np.abs(res.u.reshape(-1) - ref.u).max()))
        iters.append(int(res.iters[0]))
        unconv += int(not res.converged[0])
        active += int(len(ref.active) > 0)
    errs = np.asarray(errs)
    return SolverSuiteReport(n_instances, float(errs.max()), float(errs.mean()), int(max(iters)),
                             float(np.mean(iters)), unconv, active, time.perf_counter() - t0)


# --- gradient suites ----------------------------------------------------------------

@dataclass
class KktInstance:
    R: np.ndarray
    q: np.ndarray
    Cbar: np.ndarray  # unique rows
    dbar: np.ndarray
    u: np.ndarray
    lam_bar: np.ndarray
    active: np.ndarray  # over unique rows
    C: np.ndarray  # stacked rows with duplicates, C = M Cbar
    d: np.ndarray
    lam: np.ndarray  # an arbitrary split of lam_bar over the copies
    M: np.ndarray


def random_kkt_instance(rng: np.random.Generator, n: int | None = None, n_rows: int | None = None,
                        max_copies: int = 3) -> KktInstance:
    """QP with a known solution, LICQ on the unique rows and duplicate copies."""
    n = int(rng.integers(3, 7)) if n is None else n
    k = int(rng.integers(2, n + 3)) if n_rows is None else n_rows
    # fewer active rows than variables, otherwise u is pinned and the R, q
    # gradients vanish identically
    n_act = int(rng.integers(1, min(n - 1, k) + 1))
    A = rng.normal(size=(n, n))
    R = A @ A.T + n * np.eye(n)
    Cbar = rng.normal(size=(k, n))
    u = rng.normal(size=n)
    active = np.zeros(k, dtype=bool)
    active[rng.choice(k, n_act, replace=False)] = True
    lam_bar = np.where(active, rng.uniform(MARGIN, 2.0, k), 0.0)
    dbar = Cbar @ u + np.where(active, 0.0, rng.uniform(MARGIN, 2.0, k))
    q = -(R @ u + Cbar.T @ lam_bar)
    copies = rng.integers(1, max_copies + 1, k)
    copies[rng.integers(k)] = max(2, copies.max())  # at least one duplicated row
    order = rng.permutation(np.repeat(np.arange(k), copies))
    M = np.zeros((order.size, k))
    M[np.arange(order.size), order] = 1.0
    lam = np.zeros(order.size)
    for c in range(k):
        rows = np.flatnonzero(order == c)
        lam[rows] = lam_bar[c] * rng.dirichlet(np.ones(rows.size))
    return KktInstance(R, q, Cbar, dbar, u, lam_bar, active, M @ Cbar, M @ dbar, lam, M)


def duplicate_route(inst: KktInstance, grad_u) -> diffqp.QpGradients:
    """Stacked duplicate KKT system, then class aggregation."""
    sol = diffqp.duplicate_kkt_solve(inst.R, inst.C, inst.d, inst.u, inst.lam, grad_u)
    g = diffqp.qp_gradients(sol, inst.u)
    return diffqp.reduce_gradients(g, duplicate_map(inst.C, inst.d))


def nonduplicate_route(inst: KktInstance, grad_u, reduce: bool = True) -> diffqp.QpGradients:
    """Adjoint system on the unique rows with the unique multipliers."""
    sol = diffqp.kkt_solve(inst.R, inst.Cbar, inst.dbar, inst.u, inst.lam_bar, grad_u, active=inst.active,
                           reduce=reduce)
    return diffqp.qp_gradients(sol, inst.u)


def _class_order(inst: KktInstance) -> np.ndarray:
    """Unique row of ``Cbar`` behind each class of duplicate_map(C, d)."""
    dm = duplicate_map(inst.C, inst.d)
    reps = np.asarray([cls[0] for cls in dm.classes])
    return np.argmax(inst.M[reps], axis=1)


def route_identity_errors(inst: KktInstance, grad_u) -> dict:
    """Absolute gaps between the two routes for (R, q, Cbar, dbar)."""
    a = duplicate_route(inst, grad_u)
    b = nonduplicate_route(inst, grad_u)
    perm = _class_order(inst)
    return dict(R=float(np.abs(a.grad_R - b.grad_R).max()), q=float(np.abs(a.grad_q - b.grad_q).max()),
                C=float(np.abs(a.grad_C - b.grad_C[perm]).max()), d=float(np.abs(a.grad_d - b.grad_d[perm]).max()))


def _solve_u(R, q, C, d, hint):
    return solve_centralized_oracle(C, d, R, q, tol=1e-12, hint=hint).u


def finite_difference_gradients(inst: KktInstance, w, h: float = 1e-5) -> diffqp.QpGradients:
    """Central differences of l(u*) = w'u* for every entry of R, q, Cbar, dbar.

    R is perturbed symmetrically (both triangle entries at once), which is
    the derivative the symmetrised analytic gradient represents.
    """
    R, q, C, d = inst.R, inst.q, inst.Cbar, inst.dbar
    hint = np.flatnonzero(inst.active)

    def loss(R_, q_, C_, d_):
        return float(w @ _solve_u(R_, q_, C_, d_, hint))

    gq = np.zeros_like(q)
    for i in range(q.size):
        e = np.zeros_like(q)
        e[i] = h
        gq[i] = (loss(R, q + e, C, d) - loss(R, q - e, C, d)) / (2 * h)
    gd = np.zeros_like(d)
    for i in range(d.size):
        e = np.zeros_like(d)
        e[i] = h
        gd[i] = (loss(R, q, C, d + e) - loss(R, q, C, d - e)) / (2 * h)
    gC = np.zeros_like(C)
    for idx in np.ndindex(C.shape):
        E = np.zeros_like(C)
        E[idx] = h
        gC[idx] = (loss(R, q, C + E, d) - loss(R, q, C - E, d)) / (2 * h)
    gR = np.zeros_like(R)
    for i, j in zip(*np.triu_indices(R.shape[0])):
        E = np.zeros_like(R)
        E[i, j] = E[j, i] = h
        val = (loss(R + E, q, C, d) - loss(R - E, q, C, d)) / (2 * h)
        # d l / d R_ij for a symmetric perturbation counts both entries
        gR[i, j] = gR[j, i] = val if i == j else val / 2
    return diffqp.QpGradients(gR, gq, gC, gd)


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@dataclass
class GradSuiteReport:
    n_instances: int
    max_rel: dict  # per data block, finite differences vs analytic
    max_identity: dict  # per data block, duplicate vs non-duplicate route
    seconds: float

    def passed(self, fd_tol: float = 1e-3, id_tol: float = 1e-6) -> bool:
        return max(self.max_rel.values()) <= fd_tol and max(self.max_identity.values()) <= id_tol


def run_grad_suite(n_instances: int = 100, seed: int = 0, h: float = 1e-5) -> GradSuiteReport:
    rng = np.random.default_rng(seed)
    rel = dict(R=0.0, q=0.0, C=0.0, d=0.0)
    ident = dict(R=0.0, q=0.0, C=0.0, d=0.0)
    t0 = time.perf_counter()
    for _ in range(n_instances):
        inst = random_kkt_instance(rng)
        w = rng.normal(size=inst.u.size)
        an = nonduplicate_route(inst, w)
        fd = finite_difference_gradients(inst, w, h)
        for key, a, b in zip("RqCd", (an.grad_R, an.grad_q, an.grad_C, an.grad_d),
                             (fd.grad_R, fd.grad_q, fd.grad_C, fd.grad_d)):
            rel[key] = max(rel[key], relative_error(a, b))
        for key, v in route_identity_errors(inst, w).items():
            ident[key] = max(ident[key], v)
    return GradSuiteReport(n_instances, rel, ident, time.perf_counter() - t0)


# --- failure-probability experiment -------------------------------------------------

@dataclass
class FailureReport:
    n_rollouts: int
    B0: float
    bound: float
    p_hat: float
    std_err: float
    max_row_residual: float  # max over steps and rollouts of a'u - d
    seconds: float

    @property
    def threshold(self) -> float:
        return self.bound + 3.0 * self.std_err

    def passed(self, row_tol: float = 1e-9) -> bool:
        return self.p_hat <= self.threshold and self.max_row_residual <= row_tol


def failure_bound_experiment(n_rollouts: int = 10_000, seed: int = 0, gamma: float = 1.0, beta: float = 0.05,
                             sigma: float = 0.5, dt: float = 0.05, horizon_steps: int = 40, dist0: float = 0.9,
                             v0: float = 0.5, v_des: float = 1.0, r_sum: float = 0.5) -> FailureReport:
    """One agent heading at an obstacle, nominal control accelerating towards
    ``v_des``, projected onto the alpha = 0 SCBF half-space every step.

    An instance exits when h < 0 at any grid time, the discrete counterpart
    of leaving the safe set.
    """
    params = BarrierParams(gamma=gamma, alpha=0.0, beta=beta)
    rng = np.random.default_rng(seed)
    n = n_rollouts
    x = np.zeros((n, 4))
    x[:, 0] = -dist0
    x[:, 3] = v0
    obs = np.zeros((n, 2))
    h0, _ = obstacle_values(x[0], obs[0], r_sum, params)
    B0 = float(np.exp(-gamma * h0))
    exited = np.zeros(n, dtype=bool)
    worst = -np.inf
    t0 = time.perf_counter()
    for _ in range(horizon_steps):
        a, d, h, _ = obstacle_row(x, obs, r_sum, params, sigma)
        exited |= h < 0
        u_nom = np.stack([np.zeros(n), 2.0 * (v_des - x[:, 3])], axis=-1)
        excess = (a * u_nom).sum(-1) - d
        norm2 = (a * a).sum(-1)
        u = u_nom - np.where(excess > 0, excess / np.maximum(norm2, 1e-300), 0.0)[:, None] * a
        worst = max(worst, float(((a * u).sum(-1) - d).max()))
        x = step_arrays(x, u, rng.standard_normal((n, CONTROL_DIM)), sigma, dt)
    h, _ = obstacle_values(x, obs, r_sum, params)
    exited |= h < 0
    p_hat = float(exited.mean())
    return FailureReport(n, B0, failure_bound(B0, params, horizon_steps * dt), p_hat,
                         float(np.sqrt(p_hat * (1 - p_hat) / n)), worst, time.perf_counter() - t0)
