"""Merged consensus-ADMM / OSQP solver for the per-agent safety QPs.

Agent i solves over ``u_tilde_i = [u_i; copies of its neighbours' controls]``::

    min  0.5 u~' R~ u~ + p~' u~    s.t.  A u~ <= d,  u~ = g~

where ``g`` is the consensus (global) control and ``g~`` its restriction to
the agent's columns.  One iteration is

    block 1   (u~, z~)  from an equality-constrained QP (KKT solve)
    phase 1   send copies u_j^(i), xi_j^(i) to agent j
    block 2   z^ = min(z~ + y / rho, d);   g_i = mean(u_i^(j) + xi_i^(j) / mu)
    phase 2   send g_i back to every agent holding a copy of it
    duals     y += rho (z~ - z^);   xi += mu (u~ - g~)

Everything below runs on a batch of independent instances at once: arrays
carry a leading instance axis B and an agent axis N.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .dynamics import CONTROL_DIM

log = logging.getLogger(__name__)

PENALTY_MIN, PENALTY_MAX = 1e-6, 1e6
TRACE_COLUMNS = ("iter", "r_pri_1", "r_pri_2", "r_dual_1", "r_dual_2", "rho", "mu")


@dataclass(frozen=True)
class SolverConfig:
    rho0: float = 1.0
    mu0: float = 1.0
    eps_abs: float = 1e-4
    eps_rel: float = 1e-4
    max_iters: int = 500
    adapt_every: int = 10
    adapt_factor: float = 5.0  # only refactor when a penalty moves by more than this
    adapt: bool = True
    normalize_rows: bool = True
    shortcut: bool = True  # return -R^-1 p directly when it is already feasible
    warm_start: bool = True
    backend: str = "fused"  # "fused" (compiled loop) or "numpy" (explicit mailbox)

    def __post_init__(self):
        if not (self.rho0 > 0 and self.mu0 > 0):
            raise ValueError("penalties must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.backend not in ("fused", "numpy"):
            raise ValueError(f"unknown solver backend {self.backend!r}")


VERIFY_CONFIG = SolverConfig(eps_abs=1e-5, eps_rel=1e-5, max_iters=5000)


@dataclass
class PenaltyState:
    rho: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if not (self.rho > 0 and self.mu > 0):
            raise ValueError("penalties must be strictly positive")


@dataclass
class LocalQP:
    """One agent's subproblem together with its ADMM iterates.

    All arrays may carry matching leading batch dimensions.
    """

    R: np.ndarray  # (mt, mt)
    p: np.ndarray  # (mt,)
    A: np.ndarray  # (K, mt)
    d: np.ndarray  # (K,)
    u: np.ndarray = None
    z: np.ndarray = None
    zhat: np.ndarray = None
    y: np.ndarray = None
    xi: np.ndarray = None
    g: np.ndarray = None

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        self.d = np.asarray(self.d, dtype=float)
        mt, k = self.p.shape[-1], self.d.shape[-1]
        if self.A.shape[-2:] != (k, mt) or self.R.shape[-2:] != (mt, mt):
            raise ValueError("inconsistent LocalQP dimensions")
        lead = self.p.shape[:-1]
        for name, size in (("u", mt), ("xi", mt), ("g", mt), ("z", k), ("zhat", k), ("y", k)):
            val = getattr(self, name)
            setattr(self, name, np.zeros(lead + (size,)) if val is None else np.asarray(val, dtype=float))

    @classmethod
    def from_ego(cls, R_i, p_i, A, d, **state):
        """Build R~ = bdiag(R_i, 0) and p~ = [p_i; 0] from ego-block data."""
        A = np.asarray(A, dtype=float)
        m = np.shape(p_i)[-1]
        mt = A.shape[-1]
        R = np.zeros(np.shape(p_i)[:-1] + (mt, mt))
        R[..., :m, :m] = R_i
        p = np.zeros(np.shape(p_i)[:-1] + (mt,))
        p[..., :m] = p_i
        return cls(R, p, A, d, **state)


class ResidualReport(NamedTuple):
    r_pri_1: np.ndarray
    r_pri_2: np.ndarray
    r_dual_1: np.ndarray
    r_dual_2: np.ndarray
    eps_pri_1: np.ndarray
    eps_pri_2: np.ndarray
    eps_dual_1: np.ndarray
    eps_dual_2: np.ndarray
    kappas: tuple

    @property
    def converged(self):
        return ((self.r_pri_1 <= self.eps_pri_1) & (self.r_pri_2 <= self.eps_pri_2)
                & (self.r_dual_1 <= self.eps_dual_1) & (self.r_dual_2 <= self.eps_dual_2))


@dataclass(frozen=True)
class ConsensusMessage:
    phase: int
    sender: int
    receiver: int
    iteration: int
    payload: tuple


# --- per-agent operations -------------------------------------------------------

def _mv(M, x):
    return (M @ x[..., None])[..., 0]


def kkt_matrix(R, A, rho, mu):
    """[[R + mu I, A'], [A, -I / rho]] for (batched) local data."""
    rho = np.asarray(rho, dtype=float)[..., None, None]
    mu = np.asarray(mu, dtype=float)[..., None, None]
    mt, k = R.shape[-1], A.shape[-2]
    lead = np.broadcast_shapes(R.shape[:-2], A.shape[:-2], rho.shape[:-2], mu.shape[:-2])
    K = np.zeros(lead + (mt + k, mt + k))
    K[..., :mt, :mt] = R + mu * np.eye(mt)
    K[..., :mt, mt:] = np.swapaxes(A, -1, -2)
    K[..., mt:, :mt] = A
    K[..., mt:, mt:] = -np.eye(k) / rho
    return K


def block1_from_inverse(Kinv, p, g, xi, zhat, y, rho, mu):
    """Block-1 update given a (cached) KKT inverse."""
    mt = p.shape[-1]
    rho_ = np.asarray(rho)[..., None]
    rhs = np.concatenate([-p + mu_col(mu) * g - xi, zhat - y / rho_], axis=-1)
    sol = _mv(Kinv, rhs)
    u, nu = sol[..., :mt], sol[..., mt:]
    z = zhat - y / rho_ + nu / rho_
    return u, z


def mu_col(mu):
    return np.asarray(mu)[..., None]


def local_block1(qp: LocalQP, pen: PenaltyState):
    """Equality-constrained block-1 QP solved through its KKT system."""
    K = kkt_matrix(qp.R, qp.A, pen.rho, pen.mu)
    mt = qp.p.shape[-1]
    rhs = np.concatenate([-qp.p + pen.mu * qp.g - qp.xi, qp.zhat - qp.y / pen.rho], axis=-1)
    try:
        sol = np.linalg.solve(K, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"block-1 KKT system is singular: {exc}") from exc
    u, nu = sol[..., :mt], sol[..., mt:]
    return u, qp.zhat - qp.y / pen.rho + nu / pen.rho


def local_block2_zhat(z, y, d, rho):
    """Projection of z~ + y / rho onto (-inf, d]."""
    return np.minimum(np.asarray(z) + np.asarray(y) / rho, d)


def global_average(copies, duals, mu):
    """g_i from the copies u_i^(j) and duals xi_i^(j) of every j in P_i and i."""
    copies = np.asarray(copies, dtype=float)
    duals = np.asarray(duals, dtype=float)
    if copies.shape != duals.shape or copies.shape[0] == 0:
        raise ValueError("global_average needs one (copy, dual) pair per contributor")
    return (copies + duals / mu).mean(axis=0)


def dual_update(qp: LocalQP, pen: PenaltyState):
    y = qp.y + pen.rho * (qp.z - qp.zhat)
    xi = qp.xi + pen.mu * (qp.u - qp.g)
    return y, xi


def _inf(x, axes):
    x = np.abs(x)
    return x.max(axis=axes, initial=0.0)


def residuals(qps, pen: PenaltyState, g_prev, eps_abs: float, eps_rel: float) -> ResidualReport:
    """Termination residuals over a list of agents.

    ``g_prev`` is each agent's g~ from the previous iteration (list, same
    order).  The primal QP residual is measured against whatever is stored
    in ``qp.zhat``.
    """
    rp1 = rp2 = rd1 = rd2 = 0.0
    kp1 = kp2 = kd1 = kd2 = 0.0
    for qp, gp in zip(qps, g_prev):
        Au = qp.A @ qp.u
        Aty = qp.A.T @ qp.y
        Ru = qp.R @ qp.u
        rp1 = max(rp1, _inf(Au - qp.zhat, None))
        rp2 = max(rp2, _inf(qp.u - qp.g, None))
        rd1 = max(rd1, _inf(Ru + qp.p + Aty + qp.xi, None))
        rd2 = max(rd2, _inf(pen.mu * (qp.g - gp), None))
        kp1 = max(kp1, _inf(Au, None), _inf(qp.zhat, None))
        kp2 = max(kp2, _inf(qp.u, None), _inf(qp.g, None))
        kd1 = max(kd1, _inf(Ru, None), _inf(qp.p, None), _inf(Aty, None), _inf(qp.xi, None))
        kd2 = max(kd2, _inf(qp.xi, None))
    eps = lambda k: eps_abs + eps_rel * k  # noqa: E731
    return ResidualReport(np.float64(rp1), np.float64(rp2), np.float64(rd1), np.float64(rd2),
                          eps(kp1), eps(kp2), eps(kd1), eps(kd2), (kp1, kp2, kd1, kd2))


def _ratio(r_pri, k_pri, r_dual, k_dual):
    """sqrt of normalised primal over dual residual, 1 where undefined."""
    tiny = 1e-30
    num = r_pri / np.maximum(k_pri, tiny)
    den = r_dual / np.maximum(k_dual, tiny)
    ok = (r_pri > 0) & (r_dual > 0)
    return np.where(ok, np.sqrt(np.where(ok, num, 1.0) / np.where(ok, den, 1.0)), 1.0)


def adapt_penalties(report: ResidualReport, pen, factor: float = 1.0):
    """OSQP-style residual balancing of rho and mu.

    Works on scalar ``PenaltyState`` or on arrays ``(rho, mu)``.  A penalty
    only moves when the proposed change exceeds ``factor``.
    """
    kp1, kp2, kd1, kd2 = report.kappas
    # xi tends to zero when no coupling row is active; normalising by it
    # alone would then push mu down without bound
    kd2 = np.maximum(kd2, kd1)
    scalar = isinstance(pen, PenaltyState)
    rho, mu = (pen.rho, pen.mu) if scalar else pen
    out = []
    for val, ratio in ((rho, _ratio(report.r_pri_1, kp1, report.r_dual_1, kd1)),
                       (mu, _ratio(report.r_pri_2, kp2, report.r_dual_2, kd2))):
        new = np.clip(val * ratio, PENALTY_MIN, PENALTY_MAX)
        move = (new > val * factor) | (new < val / factor) if factor > 1 else np.ones_like(new, bool)
        out.append(np.where(move, new, val))
    if scalar:
        return PenaltyState(float(out[0]), float(out[1]))
    return out[0], out[1]


# --- transport ------------------------------------------------------------------

class Mailbox:
    """In-process message passing between agents of a batch of instances.

    ``idx`` (B, N, L) holds the global agent of each local block (ego first).
    Phase 1 routes every copy block to its owner and reduces; phase 2
    broadcasts the consensus values back.  All traffic is counted.
    """

    def __init__(self, idx: np.ndarray, n_agents: int, record: bool = False):
        self.idx = np.asarray(idx)
        self.n = n_agents
        self.onehot = (self.idx[..., None] == np.arange(n_agents)).astype(float)  # (B, N, L, N)
        self.counts = self.onehot.sum(axis=(1, 2))  # (B, N) = 1 + |P_j|
        self.copies_per_phase = int(self.idx.shape[0] * self.idx.shape[1] * (self.idx.shape[2] - 1))
        self.pre_exchanges = 0
        self.phases = 0
        self.messages = 0
        self.record = record
        self.log: list[ConsensusMessage] = []

    def pre_exchange(self):
        """States are shared once before the iterations so rows can be built."""
        self.pre_exchanges += 1
        self.messages += self.copies_per_phase

    def _log(self, phase, iteration, values):
        if not self.record:
            return
        B, N, L = self.idx.shape
        for b, i, q in itertools.product(range(B), range(N), range(1, L)):
            j = int(self.idx[b, i, q])
            sender, receiver = (i, j) if phase == 1 else (j, i)
            self.log.append(ConsensusMessage(phase, sender, receiver, iteration,
                                             tuple(np.ravel(values[b, i, q]))))

    def phase1(self, contributions, iteration=0):
        """contributions (B, N, L, m) -> per-owner averages (B, N, m)."""
        self.phases += 1
        self.messages += self.copies_per_phase
        self._log(1, iteration, contributions)
        sums = np.einsum("bilj,bilm->bjm", self.onehot, contributions)
        return sums / self.counts[..., None]

    def phase2(self, g, iteration=0):
        """g (B, N, m) -> each agent's g~ (B, N, L, m)."""
        self.phases += 1
        self.messages += self.copies_per_phase
        out = np.take_along_axis(g[:, None, :, :], self.idx[..., None], axis=2)
        self._log(2, iteration, out)
        return out


# --- batched engine -----------------------------------------------------------

@dataclass
class DecentralizedProblem:
    """Batch of decentralized QPs.

    R (B, N, m, m) ego costs, p (B, N, m) ego linear terms, A (B, N, K, m L)
    local rows, d (B, N, K), nbr (B, N, r) neighbour indices.
    """

    R: np.ndarray
    p: np.ndarray
    A: np.ndarray
    d: np.ndarray
    nbr: np.ndarray

    def __post_init__(self):
        if self.p.ndim == 2:  # single instance
            self.R, self.p, self.A, self.d, self.nbr = (
                np.asarray(x)[None] for x in (self.R, self.p, self.A, self.d, self.nbr))
        self.R = np.asarray(self.R, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        self.d = np.asarray(self.d, dtype=float)
        self.nbr = np.asarray(self.nbr, dtype=int).reshape(self.p.shape[:2] + (-1,))
        B, N, m = self.p.shape
        L = self.nbr.shape[-1] + 1
        if self.A.shape[:2] != (B, N) or self.A.shape[-1] != m * L or self.d.shape != self.A.shape[:3]:
            raise ValueError("inconsistent decentralized problem dimensions")
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.d))):
            raise FloatingPointError("non-finite QP data")

    @property
    def idx(self):
        B, N = self.p.shape[:2]
        ego = np.broadcast_to(np.arange(N)[None, :, None], (B, N, 1))
        return np.concatenate([ego, self.nbr], axis=-1)

    @property
    def shape(self):
        return self.A.shape


@dataclass
class SolverState:
    """Terminal ADMM iterates, reusable as a warm start."""

    u: np.ndarray
    zhat: np.ndarray
    y: np.ndarray
    xi: np.ndarray
    g: np.ndarray
    rho: np.ndarray
    mu: np.ndarray
    nbr: np.ndarray


@dataclass
class SolveResult:
    u: np.ndarray  # (B, N, m) consensus controls
    lam: np.ndarray  # (B, N, K) multipliers of the original (unscaled) rows
    iters: np.ndarray  # (B,)
    converged: np.ndarray  # (B,)
    report: ResidualReport
    state: SolverState
    trace: list = field(default_factory=list)
    mailbox: Mailbox | None = None

    @property
    def active(self):
        return self.lam > 0


def _report(A, u, zhat, y, xi, g_t, g_prev, R_ego, p_ego, mu, cfg: SolverConfig, m: int):
    """Batched residuals; max over agents, one value per instance."""
    Au = _mv(A, u)
    Aty = (np.swapaxes(A, -1, -2) @ y[..., None])[..., 0]
    Ru = np.zeros_like(u)
    Ru[..., :m] = _mv(R_ego, u[..., :m])
    lin = Ru + Aty + xi
    lin[..., :m] += p_ego
    ax = (1, 2)
    rp1 = _inf(Au - zhat, ax)
    rp2 = _inf(u - g_t, ax)
    rd1 = _inf(lin, ax)
    rd2 = _inf(mu[:, None, None] * (g_t - g_prev), ax)
    kp1 = np.maximum(_inf(Au, ax), _inf(zhat, ax))
    kp2 = np.maximum(_inf(u, ax), _inf(g_t, ax))
    kx = _inf(xi, ax)
    kd1 = np.maximum.reduce([_inf(Ru, ax), _inf(p_ego, ax), _inf(Aty, ax), kx])
    e = lambda k: cfg.eps_abs + cfg.eps_rel * k  # noqa: E731
    return ResidualReport(rp1, rp2, rd1, rd2, e(kp1), e(kp2), e(kd1), e(kx), (kp1, kp2, kd1, kx))


def _select(mask, new, old):
    shape = (-1,) + (1,) * (new.ndim - 1)
    return np.where(mask.reshape(shape), new, old)


def unconstrained_solution(R, p):
    return -np.linalg.solve(R, p[..., None])[..., 0]


def _warm(prob: DecentralizedProblem, warm: SolverState, mt: int, K: int):
    """Initial iterates from a previous solve with possibly different neighbours."""
    B, N, m = prob.p.shape
    idx = prob.idx
    g_t = np.take_along_axis(warm.g[:, None, :, :], idx[..., None], axis=2).reshape(B, N, mt)
    same = np.all(warm.nbr == prob.nbr, axis=-1) if warm.nbr.shape == prob.nbr.shape \
        else np.zeros((B, N), bool)
    keep = same[..., None]
    if warm.y.shape == (B, N, K):
        y = np.where(keep, warm.y, 0.0)
        xi = np.where(keep, warm.xi, 0.0)
        zhat = np.where(keep, warm.zhat, np.minimum(_mv(prob.A, g_t), prob.d))
    else:
        y = np.zeros((B, N, K))
        xi = np.zeros((B, N, mt))
        zhat = np.minimum(_mv(prob.A, g_t), prob.d)
    return g_t.copy(), zhat, y, xi, warm.g.copy(), np.asarray(warm.rho, float).copy(), np.asarray(warm.mu, float).copy()


def solve_decentralized(prob: DecentralizedProblem, config: SolverConfig = SolverConfig(),
                        warm: SolverState | None = None, mailbox: Mailbox | None = None,
                        trace: bool = False) -> SolveResult:
    """Run merged CADMM-OSQP on a batch of instances until each converges."""
    cfg = config
    B, N, m = prob.p.shape
    K, mt = prob.A.shape[-2:]
    idx = prob.idx
    mb = mailbox if mailbox is not None else Mailbox(idx, N)
    mb.pre_exchange()

    A, d = prob.A, prob.d
    scale = np.ones((B, N, K))
    if cfg.normalize_rows and K:
        norms = np.abs(A).max(axis=-1)
        scale = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 1.0)
        A = A * scale[..., None]
        d = d * scale

    u0 = unconstrained_solution(prob.R, prob.p)  # (B, N, m)
    if cfg.shortcut:
        u0_t = np.take_along_axis(u0[:, None], idx[..., None], axis=2).reshape(B, N, mt)
        feasible = np.all(_mv(A, u0_t) <= d, axis=(1, 2)) if K else np.ones(B, bool)
    else:
        feasible = np.zeros(B, bool)

    if warm is not None and cfg.warm_start:
        u, zhat, y, xi, g, rho, mu = _warm(prob, warm, mt, K)
    else:
        u = np.zeros((B, N, mt))
        zhat = np.minimum(np.zeros((B, N, K)), d)
        y = np.zeros((B, N, K))
        xi = np.zeros((B, N, mt))
        g = np.zeros((B, N, m))
        rho = np.full(B, cfg.rho0)
        mu = np.full(B, cfg.mu0)
    g_t = np.take_along_axis(g[:, None], idx[..., None], axis=2).reshape(B, N, mt)

    R_t = np.zeros((B, N, mt, mt))
    R_t[..., :m, :m] = prob.R
    p_t = np.zeros((B, N, mt))
    p_t[..., :m] = prob.p

    if cfg.backend == "fused" and not trace:
        return _solve_fused(prob, cfg, mb, A, d, scale, idx, feasible, u0, u, zhat, y, xi, g, rho, mu)

    def factor(rho_, mu_):
        return np.linalg.inv(kkt_matrix(R_t, A, rho_[:, None], mu_[:, None]))

    running = ~feasible
    iters = np.zeros(B, dtype=int)
    converged = feasible.copy()
    rows = []
    rep = None
    Kinv = factor(rho, mu) if running.any() else None
    z = zhat.copy()
    for it in range(1, cfg.max_iters + 1):
        if not running.any():
            break
        rho_c = rho[:, None, None]
        mu_c = mu[:, None, None]
        # block 1
        rhs = np.concatenate([-p_t + mu_c * g_t - xi, zhat - y / rho_c], axis=-1)
        sol = _mv(Kinv, rhs)
        u_n = sol[..., :mt]
        z_n = zhat - y / rho_c + sol[..., mt:] / rho_c
        # block 2 with phase-1 messages
        v = z_n + y / rho_c
        clipped = v >= d
        zhat_n = np.where(clipped, d, v)
        contrib = (u_n + xi / mu_c).reshape(B, N, mt // m, m)
        g_n = mb.phase1(contrib, it)
        g_t_n = mb.phase2(g_n, it).reshape(B, N, mt)
        # duals; unclipped rows have exactly zero multiplier
        y_n = np.where(clipped, y + rho_c * (z_n - zhat_n), 0.0)
        xi_n = xi + mu_c * (u_n - g_t_n)

        rep = _report(A, u_n, zhat_n, y_n, xi_n, g_t_n, g_t, prob.R, prob.p, mu, cfg, m)
        done = rep.converged & running

        u, z, zhat = (_select(running, a, b) for a, b in ((u_n, u), (z_n, z), (zhat_n, zhat)))
        y, xi = _select(running, y_n, y), _select(running, xi_n, xi)
        g, g_t = _select(running, g_n, g), _select(running, g_t_n, g_t)
        iters = np.where(running, it, iters)
        converged |= done
        if trace:
            sel = running
            rows.append((it, float(rep.r_pri_1[sel].max()), float(rep.r_pri_2[sel].max()),
                         float(rep.r_dual_1[sel].max()), float(rep.r_dual_2[sel].max()),
                         float(rho[sel].max()), float(mu[sel].max())))
        running = running & ~done
        if cfg.adapt and it % cfg.adapt_every == 0 and running.any():
            rho_new, mu_new = adapt_penalties(rep, (rho, mu), cfg.adapt_factor)
            rho_new = np.where(running, rho_new, rho)
            mu_new = np.where(running, mu_new, mu)
            changed = (rho_new != rho) | (mu_new != mu)
            rho, mu = rho_new, mu_new
            if changed.any():
                Kinv = np.where(changed[:, None, None, None], factor(rho, mu), Kinv)

    if running.any():
        log.info("ADMM hit max_iters=%d on %d/%d instances", cfg.max_iters, int(running.sum()), B)

    # shortcut instances: exact unconstrained optimum
    if feasible.any():
        g = _select(feasible, u0, g)
        u0_t = np.take_along_axis(u0[:, None], idx[..., None], axis=2).reshape(B, N, mt)
        u = _select(feasible, u0_t, u)
        g_t = _select(feasible, u0_t, g_t)
        zhat = _select(feasible, np.minimum(_mv(A, u0_t), d), zhat)
        y = _select(feasible, np.zeros_like(y), y)
        xi = _select(feasible, np.zeros_like(xi), xi)
    if rep is None:
        zero = np.zeros(B)
        rep = ResidualReport(zero, zero, zero, zero, zero + cfg.eps_abs, zero + cfg.eps_abs,
                             zero + cfg.eps_abs, zero + cfg.eps_abs, (zero, zero, zero, zero))

    lam = y * scale
    state = SolverState(u.copy(), zhat.copy(), y.copy(), xi.copy(), g.copy(), rho.copy(), mu.copy(),
                        prob.nbr.copy())
    return SolveResult(g.copy(), lam, iters, converged, rep, state, rows, mb)


def _solve_fused(prob, cfg, mb, A, d, scale, idx, feasible, u0, u, zhat, y, xi, g, rho, mu):
    from . import _fused

    B, N, m = prob.p.shape
    K, mt = A.shape[-2:]
    z = zhat.copy()
    iters = np.zeros(B, dtype=np.int64)
    converged = feasible.copy()
    rep = np.zeros((B, 8))
    run = ~feasible
    c = np.ascontiguousarray
    u, z, zhat, y, xi, g = (c(x, dtype=float) for x in (u, z, zhat, y, xi, g))
    rho, mu = c(rho, dtype=float), c(mu, dtype=float)
    _fused.admm_batch(c(A), c(d), c(prob.R), c(prob.p), c(idx, dtype=np.int64), c(mb.counts),
                      u, z, zhat, y, xi, g, rho, mu, run,
                      float(cfg.eps_abs), float(cfg.eps_rel), int(cfg.max_iters), bool(cfg.adapt),
                      int(cfg.adapt_every), float(cfg.adapt_factor), iters, converged, rep)
    n_it = int(iters.max(initial=0))
    mb.phases += 2 * n_it
    mb.messages += 2 * n_it * mb.copies_per_phase
    if (run & ~converged).any():
        log.info("ADMM hit max_iters=%d on %d/%d instances", cfg.max_iters, int((run & ~converged).sum()), B)
    if feasible.any():
        u0_t = np.take_along_axis(u0[:, None], idx[..., None], axis=2).reshape(B, N, mt)
        g = _select(feasible, u0, g)
        u = _select(feasible, u0_t, u)
        zhat = _select(feasible, np.minimum(_mv(A, u0_t), d), zhat)
        y = _select(feasible, np.zeros_like(y), y)
        xi = _select(feasible, np.zeros_like(xi), xi)
        rep[feasible, 4:] = cfg.eps_abs
        rep[feasible, :4] = 0.0
    report = ResidualReport(*(rep[:, k] for k in range(8)), (None, None, None, None))
    state = SolverState(u, zhat, y, xi, g.copy(), rho, mu, prob.nbr.copy())
    return SolveResult(g, y * scale, iters, converged, report, state, [], mb)


def write_trace(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in rows:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


# --- centralised oracle -----------------------------------------------------------

class OracleResult(NamedTuple):
    u: np.ndarray
    lam: np.ndarray
    active: tuple


def solve_centralized_oracle(C, d, R, p, tol: float = 1e-9, hint=None) -> OracleResult:
    """Exact QP solution by enumerating candidate active sets.

    Identical rows are merged first (subsets holding both copies are
    singular); the class multiplier is reported on the first row of each
    class.  Subsets are tried by increasing size, so the first candidate
    that is primal feasible with non-negative multipliers is returned.
    ``hint`` (row indices) is tried before the enumeration and accepted only
    if it passes the same feasibility and sign checks.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d = np.asarray(d, dtype=float).reshape(-1)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    p = np.asarray(p, dtype=float).reshape(-1)
    n = p.size
    if C.size == 0:
        C = np.zeros((0, n))
    if C.shape[1] != n:
        raise ValueError("C has the wrong number of columns")
    key = np.concatenate([C, d[:, None]], axis=1)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    Cu, du = C[first], d[first]
    Rinv = np.linalg.inv(R)
    u_free = -Rinv @ p
    scale = 1.0 + np.abs(du)
    if np.all(Cu @ u_free <= du + tol * scale):
        return OracleResult(u_free, np.zeros(len(d)), ())
    W = Cu @ Rinv @ Cu.T  # Gram matrix of the rows in the R^-1 metric
    b = Cu @ u_free - du
    nu = len(du)
    sizes = (np.array(list(itertools.combinations(range(nu), k))) for k in range(1, min(nu, n) + 1))
    first_try = [] if hint is None or not len(hint) else [np.unique(inverse[np.asarray(hint, dtype=int)])[None]]
    for subsets in itertools.chain(first_try, sizes):
        Ws = W[subsets[:, :, None], subsets[:, None, :]]
        sv = np.linalg.svd(Ws, compute_uv=False)
        ok = sv[:, -1] > 1e-12 * np.maximum(sv[:, 0], 1e-300)
        if not ok.any():
            continue
        subsets, Ws = subsets[ok], Ws[ok]
        lam_s = np.linalg.solve(Ws, b[subsets][..., None])[..., 0]
        # u = u_free - R^-1 C_S' lam_S
        u = u_free[None] - np.einsum("ij,skj,sk->si", Rinv, Cu[subsets], lam_s)
        slack = du[None] - u @ Cu.T
        good = np.all(slack >= -tol * scale, axis=1) & np.all(lam_s >= -tol, axis=1)
        if good.any():
            s = int(np.flatnonzero(good)[0])
            lam_u = np.zeros(nu)
            lam_u[subsets[s]] = np.maximum(lam_s[s], 0.0)
            lam = np.zeros(len(d))
            lam[first] = lam_u
            return OracleResult(u[s], lam, tuple(int(x) for x in first[subsets[s]]))
    raise ValueError("QP is infeasible: no active set yields a feasible KKT point")
