"""Stochastic control barrier functions for agent-agent and agent-obstacle
safety.

Safety sets are encoded by a function h (safe iff ``h >= 0``) and the barrier
``B = exp(-gamma h)``.  Two relative-degree-one constructions are supported:

* Type-A (agent i vs agent j, common radius r)::

      h = 0.5 (|p_i - p_j|^2 - 4 r^2) - mu_b (v_i IP_i + v_j IP_j)

* Type-B (agent i vs obstacle o)::

      h = 0.5 (|p_i - p_o|^2 - (r_i + r_o)^2) - mu_b v_i IP

where ``IP_i`` is the inner product of the relative position from i towards
the other body with i's heading unit vector.  The older speed-squared
penalty (``h_pos - mu_b v^2``) is kept for comparison runs.

All formulas are vectorised over leading dimensions and run unchanged on
numpy arrays or torch tensors, so constraint rows can sit inside an autograd
graph.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from . import _xp
from .dynamics import NoiseModel

log = logging.getLogger(__name__)

EXPONENT_CLAMP = 30.0
DEGENERACY_TOL = 1e-10


@dataclass(frozen=True)
class BarrierParams:
    gamma: float = 1.0
    alpha: float = 1.0
    beta: float = 0.5
    mu_b: float = 0.2
    normalize_ip: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.alpha < 0 or self.beta < 0 or self.mu_b < 0:
            raise ValueError("alpha, beta and mu_b must be >= 0")


@dataclass(frozen=True)
class TypeA:
    i: int
    j: int
    r_agent: float

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("Type-A barrier needs two distinct agents")
        if not self.r_agent > 0:
            raise ValueError("agent radius must be > 0")


@dataclass(frozen=True)
class TypeB:
    i: int
    obstacle: int
    r_i: float
    r_o: float

    def __post_init__(self):
        if not (self.r_i > 0 and self.r_o > 0):
            raise ValueError("radii must be > 0")


@dataclass(frozen=True)
class Legacy:
    """Speed-squared barrier on top of a Type-A or Type-B position term."""

    base: Union[TypeA, TypeB]


@dataclass(frozen=True)
class BarrierSpec:
    kind: Union[TypeA, TypeB, Legacy]
    params: BarrierParams = field(default_factory=BarrierParams)

    @property
    def agents(self) -> tuple[int, ...]:
        base = self.kind.base if isinstance(self.kind, Legacy) else self.kind
        return (base.i, base.j) if isinstance(base, TypeA) else (base.i,)


class BarrierValue(NamedTuple):
    """B, dB/dxbar, d2B/dxbar2 plus the underlying h and h_pos."""

    B: object
    dB: object
    d2B: object
    h: object
    h_pos: object


@dataclass
class ConstraintRow:
    a: np.ndarray
    d: float
    owners: tuple[int, ...]
    degenerate: bool = False


# --- scalar pieces ---------------------------------------------------------

def _heading_dot(dx, dy, th, normalize: bool):
    """f = (dx cos th + dy sin th) / |(dx, dy)|^k with its gradient and
    Hessian in the local variables (dx, dy, th).  k = 1 when normalised."""
    c, s = _xp.cos(th), _xp.sin(th)
    w = dx * c + dy * s
    zero = _xp.zeros_like(w)
    w_g = [c, s, -dx * s + dy * c]
    w_h = [[zero, zero, -s], [zero, zero, c], [-s, c, -w]]
    if not normalize:
        return w, w_g, w_h
    rho2 = dx * dx + dy * dy
    rho = _xp.sqrt(rho2)
    r1 = 1.0 / rho
    r3 = r1 / rho2
    r5 = r3 / rho2
    phi = r1
    phi_g = [-dx * r3, -dy * r3, zero]
    phi_h = [
        [-r3 + 3 * dx * dx * r5, 3 * dx * dy * r5, zero],
        [3 * dx * dy * r5, -r3 + 3 * dy * dy * r5, zero],
        [zero, zero, zero],
    ]
    f = w * phi
    f_g = [w_g[a] * phi + w * phi_g[a] for a in range(3)]
    f_h = [
        [w_h[a][b] * phi + w_g[a] * phi_g[b] + w_g[b] * phi_g[a] + w * phi_h[a][b] for b in range(3)]
        for a in range(3)
    ]
    return f, f_g, f_h


def _stack_grad(g):
    return _xp.stack(list(g))


def _stack_hess(h):
    return _xp.stack([_xp.stack(list(row)) for row in h], axis=-2)


# Linear maps from the stacked states xbar to the local variables.
# Type-A locals: (dx, dy, th_i, v_i, th_j, v_j), xbar = [x_i; x_j].
_J_PAIR = np.zeros((6, 8))
_J_PAIR[0, 0], _J_PAIR[0, 4] = 1.0, -1.0
_J_PAIR[1, 1], _J_PAIR[1, 5] = 1.0, -1.0
_J_PAIR[2, 2] = _J_PAIR[3, 3] = _J_PAIR[4, 6] = _J_PAIR[5, 7] = 1.0
# Type-B locals: (dx, dy, th, v), xbar = x_i.
_J_OBS = np.eye(4)


def _pair_h(xi, xj, r: float, mu_b: float, normalize: bool, legacy: bool):
    dx = xi[..., 0] - xj[..., 0]
    dy = xi[..., 1] - xj[..., 1]
    th_i, v_i, th_j, v_j = xi[..., 2], xi[..., 3], xj[..., 2], xj[..., 3]
    zero = _xp.zeros_like(dx)
    one = _xp.ones_like(dx)
    h_pos = 0.5 * (dx * dx + dy * dy - 4.0 * r * r)
    if legacy:
        h = h_pos - mu_b * (v_i * v_i + v_j * v_j)
        g = [dx, dy, zero, -2 * mu_b * v_i, zero, -2 * mu_b * v_j]
        H = [[zero] * 6 for _ in range(6)]
        H[0][0] = one
        H[1][1] = one
        H[3][3] = -2 * mu_b * one
        H[5][5] = -2 * mu_b * one
        return h, h_pos, g, H
    # IP_i = -f(dx, dy, th_i), IP_j = +f(dx, dy, th_j)
    fi, fi_g, fi_h = _heading_dot(dx, dy, th_i, normalize)
    fj, fj_g, fj_h = _heading_dot(dx, dy, th_j, normalize)
    h = h_pos + mu_b * v_i * fi - mu_b * v_j * fj
    g = [
        dx + mu_b * v_i * fi_g[0] - mu_b * v_j * fj_g[0],
        dy + mu_b * v_i * fi_g[1] - mu_b * v_j * fj_g[1],
        mu_b * v_i * fi_g[2],
        mu_b * fi,
        -mu_b * v_j * fj_g[2],
        -mu_b * fj,
    ]
    H = [[zero] * 6 for _ in range(6)]
    for a in range(2):
        for b in range(2):
            H[a][b] = mu_b * v_i * fi_h[a][b] - mu_b * v_j * fj_h[a][b]
        H[a][a] = H[a][a] + one
        H[a][2] = H[2][a] = mu_b * v_i * fi_h[a][2]
        H[a][3] = H[3][a] = mu_b * fi_g[a]
        H[a][4] = H[4][a] = -mu_b * v_j * fj_h[a][2]
        H[a][5] = H[5][a] = -mu_b * fj_g[a]
    H[2][2] = mu_b * v_i * fi_h[2][2]
    H[2][3] = H[3][2] = mu_b * fi_g[2]
    H[4][4] = -mu_b * v_j * fj_h[2][2]
    H[4][5] = H[5][4] = -mu_b * fj_g[2]
    return h, h_pos, g, H


def _obstacle_h(xi, obs_xy, r_sum: float, mu_b: float, normalize: bool, legacy: bool):
    dx = xi[..., 0] - obs_xy[..., 0]
    dy = xi[..., 1] - obs_xy[..., 1]
    th, v = xi[..., 2], xi[..., 3]
    zero = _xp.zeros_like(dx)
    one = _xp.ones_like(dx)
    h_pos = 0.5 * (dx * dx + dy * dy - r_sum * r_sum)
    H = [[zero] * 4 for _ in range(4)]
    H[0][0] = one
    H[1][1] = one
    if legacy:
        h = h_pos - mu_b * v * v
        g = [dx, dy, zero, -2 * mu_b * v]
        H[3][3] = -2 * mu_b * one
        return h, h_pos, g, H
    # IP = p_io . heading = -f(dx, dy, th)
    f, f_g, f_h = _heading_dot(dx, dy, th, normalize)
    h = h_pos + mu_b * v * f
    g = [dx + mu_b * v * f_g[0], dy + mu_b * v * f_g[1], mu_b * v * f_g[2], mu_b * f]
    for a in range(2):
        for b in range(2):
            H[a][b] = H[a][b] + mu_b * v * f_h[a][b]
        H[a][2] = H[2][a] = mu_b * v * f_h[a][2]
        H[a][3] = H[3][a] = mu_b * f_g[a]
    H[2][2] = mu_b * v * f_h[2][2]
    H[2][3] = H[3][2] = mu_b * f_g[2]
    return h, h_pos, g, H


def _exp_barrier(h, h_pos, g_loc, H_loc, J, gamma: float) -> BarrierValue:
    g_loc = _stack_grad(g_loc)
    H_loc = _stack_hess(H_loc)
    Jx = _xp.asarray_like(J, g_loc)
    dh = g_loc @ Jx
    d2h = Jx.T @ H_loc @ Jx
    B = _xp.exp(_xp.minimum(-gamma * h, EXPONENT_CLAMP))
    dB = -gamma * B[..., None] * dh
    outer = dh[..., :, None] * dh[..., None, :]
    d2B = B[..., None, None] * (gamma * gamma * outer - gamma * d2h)
    return BarrierValue(B, dB, d2B, h, h_pos)


# --- public API ------------------------------------------------------------

def _as_array(x):
    return x if _xp.is_torch(x) else np.asarray(x, dtype=float)


def h_typeA(si, sj, spec: BarrierSpec):
    """Type-A barrier value for agents ``si`` and ``sj`` (arrays (..., 4))."""
    if not isinstance(spec.kind, TypeA):
        raise ValueError("h_typeA needs a TypeA spec")
    p = spec.params
    h, *_ = _pair_h(_as_array(si), _as_array(sj), spec.kind.r_agent, p.mu_b, p.normalize_ip, False)
    return h


def h_typeB(si, obstacle, spec: BarrierSpec):
    """Type-B barrier value; ``obstacle`` is (x_o, y_o) or (x_o, y_o, r_o)."""
    if not isinstance(spec.kind, TypeB):
        raise ValueError("h_typeB needs a TypeB spec")
    p = spec.params
    obs = _as_array(obstacle)
    h, *_ = _obstacle_h(_as_array(si), obs[..., :2], spec.kind.r_i + spec.kind.r_o,
                        p.mu_b, p.normalize_ip, False)
    return h


def legacy_h(si, h_pos, mu_b: float):
    """Speed-squared barrier h_pos - mu_b v^2."""
    v = _as_array(si)[..., 3]
    return h_pos - mu_b * v * v


def pair_barrier(xi, xj, r_agent: float, params: BarrierParams, legacy: bool = False) -> BarrierValue:
    """Vectorised Type-A (or legacy pair) barrier with derivatives in
    xbar = [x_i; x_j] (8 entries)."""
    h, h_pos, g, H = _pair_h(xi, xj, r_agent, params.mu_b, params.normalize_ip, legacy)
    return _exp_barrier(h, h_pos, g, H, _J_PAIR, params.gamma)


def obstacle_barrier(xi, obs_xy, r_sum: float, params: BarrierParams, legacy: bool = False) -> BarrierValue:
    """Vectorised Type-B (or legacy obstacle) barrier with derivatives in
    xbar = x_i (4 entries).  ``r_sum`` is r_i + r_o."""
    h, h_pos, g, H = _obstacle_h(xi, obs_xy, r_sum, params.mu_b, params.normalize_ip, legacy)
    return _exp_barrier(h, h_pos, g, H, _J_OBS, params.gamma)


def barrier_derivatives(spec: BarrierSpec, states, obstacles=None) -> BarrierValue:
    """Evaluate B and its first two derivatives for one barrier.

    ``states`` is the (N, 4) agent state array (or a batch thereof) and
    ``obstacles`` an array of obstacle centres (N_o, 2).
    """
    states = _as_array(states)
    kind = spec.kind
    legacy = isinstance(kind, Legacy)
    base = kind.base if legacy else kind
    if isinstance(base, TypeA):
        return pair_barrier(states[..., base.i, :], states[..., base.j, :], base.r_agent, spec.params, legacy)
    if obstacles is None:
        raise ValueError("Type-B barrier needs obstacle positions")
    obs = _as_array(obstacles)[..., base.obstacle, :2]
    return obstacle_barrier(states[..., base.i, :], obs, base.r_i + base.r_o, spec.params, legacy)


def row_from_barrier(bv: BarrierValue, xbar, params: BarrierParams, sigma: float):
    """Linear-in-u SCBF row ``a^T u <= d`` for a barrier evaluated at xbar.

    a = Gbar^T dB,  d = -alpha B + beta - dB^T fbar - 0.5 tr(d2B Sigma Sigma^T)

    ``xbar`` stacks the states of the one or two agents the barrier touches;
    Gbar, fbar and Sigma are block-diagonal, so the row is built per block.
    """
    from .dynamics import NOISY_CHANNELS, actuation, drift

    a_parts = []
    drift_term = 0.0
    trace = 0.0
    for k in range(xbar.shape[-1] // 4):
        sl = slice(4 * k, 4 * k + 4)
        part, dB = xbar[..., sl], bv.dB[..., sl]
        a_parts.append((dB[..., None, :] @ actuation(part))[..., 0, :])
        drift_term = drift_term + (dB * drift(part)).sum(-1)
        for c in NOISY_CHANNELS:
            trace = trace + bv.d2B[..., 4 * k + c, 4 * k + c]
    a = _xp.concat(a_parts)
    d = -params.alpha * bv.B + params.beta - drift_term - 0.5 * sigma * sigma * trace
    return a, d


def constraint_row(spec: BarrierSpec, states, model: NoiseModel, params: BarrierParams | None = None,
                   obstacles=None) -> ConstraintRow:
    """Assemble the SCBF inequality for one barrier at the current states.

    ``params`` overrides ``spec.params`` when given.
    """
    if params is not None and params != spec.params:
        spec = BarrierSpec(spec.kind, params)
    states = np.asarray(states, dtype=float)
    bv = barrier_derivatives(spec, states, obstacles)
    owners = spec.agents
    xbar = np.concatenate([states[..., k, :] for k in owners], axis=-1)
    a, d = row_from_barrier(bv, xbar, spec.params, model.sigma)
    degenerate = bool(np.max(np.abs(a)) < DEGENERACY_TOL)
    if degenerate:
        log.warning("degenerate SCBF row for %s: |a|_inf < %g", spec.kind, DEGENERACY_TOL)
    return ConstraintRow(np.asarray(a), float(d), owners, degenerate)


def failure_bound(B0: float, params: BarrierParams, T: float) -> float:
    """Upper bound on the probability of leaving the safe set within [0, T]."""
    if B0 < 0:
        raise ValueError("B0 must be >= 0")
    if not T > 0:
        raise ValueError("T must be > 0")
    if B0 > 1:
        return 1.0
    alpha, beta = params.alpha, params.beta
    if alpha == 0:
        bound = B0 + beta * T
    elif beta <= alpha:
        bound = 1.0 - (1.0 - B0) * math.exp(-beta * T)
    else:
        grow = math.exp(beta * T)
        bound = (B0 + (grow - 1.0) * beta / alpha) / grow
    return min(max(bound, 0.0), 1.0)


def pair_values(xi, xj, r_agent: float, params: BarrierParams):
    """(h, h_pos) of the Type-A barrier without derivatives."""
    h, h_pos, _, _ = _pair_h(_as_array(xi), _as_array(xj), r_agent, params.mu_b, params.normalize_ip, False)
    return h, h_pos


def obstacle_values(xi, obs_xy, r_sum, params: BarrierParams):
    """(h, h_pos) of the Type-B barrier without derivatives."""
    h, h_pos, _, _ = _obstacle_h(_as_array(xi), _as_array(obs_xy), r_sum, params.mu_b, params.normalize_ip, False)
    return h, h_pos


# --- direct row assembly ------------------------------------------------------
# The SCBF row only needs dB and the noisy-channel diagonal of d2B, so the
# full Hessian (and the Jacobian products) can be skipped.  For both heading
# terms the (th, th) second derivative of f is -f.

def _row_terms(h, g_x, hdiag, blocks, gamma, params, sigma):
    """blocks: list of (x, dB slice positions); returns a (..., 2 * len), d."""
    B = _xp.exp(_xp.minimum(-gamma * h, EXPONENT_CLAMP))
    a_parts, drift_term, trace = [], 0.0, 0.0
    for x, (gx, gy, gth, gv), (hth, hv) in zip(blocks, g_x, hdiag):
        th, v = x[..., 2], x[..., 3]
        dB_x, dB_y, dB_th, dB_v = (-gamma * B * t for t in (gx, gy, gth, gv))
        a_parts += [dB_th * v, dB_v]
        drift_term = drift_term + dB_x * v * _xp.cos(th) + dB_y * v * _xp.sin(th)
        trace = trace + B * (gamma * gamma * gth * gth - gamma * hth) + B * (gamma * gamma * gv * gv - gamma * hv)
    a = _xp.stack(a_parts)
    d = -params.alpha * B + params.beta - drift_term - 0.5 * sigma * sigma * trace
    return a, d


def pair_row(xi, xj, r_agent: float, params: BarrierParams, sigma: float, legacy: bool = False):
    """Type-A (or legacy pair) row: returns (a (..., 4), d, h, h_pos)."""
    mu = params.mu_b
    dx = xi[..., 0] - xj[..., 0]
    dy = xi[..., 1] - xj[..., 1]
    th_i, v_i, th_j, v_j = xi[..., 2], xi[..., 3], xj[..., 2], xj[..., 3]
    h_pos = 0.5 * (dx * dx + dy * dy - 4.0 * r_agent * r_agent)
    zero = _xp.zeros_like(dx)
    if legacy:
        h = h_pos - mu * (v_i * v_i + v_j * v_j)
        g_i = (dx, dy, zero, -2 * mu * v_i)
        g_j = (-dx, -dy, zero, -2 * mu * v_j)
        hd = ((zero, zero - 2 * mu), (zero, zero - 2 * mu))
    else:
        fi, fi_g = _heading_first(dx, dy, th_i, params.normalize_ip)
        fj, fj_g = _heading_first(dx, dy, th_j, params.normalize_ip)
        h = h_pos + mu * v_i * fi - mu * v_j * fj
        gdx = dx + mu * v_i * fi_g[0] - mu * v_j * fj_g[0]
        gdy = dy + mu * v_i * fi_g[1] - mu * v_j * fj_g[1]
        g_i = (gdx, gdy, mu * v_i * fi_g[2], mu * fi)
        g_j = (-gdx, -gdy, -mu * v_j * fj_g[2], -mu * fj)
        hd = ((-mu * v_i * fi, zero), (mu * v_j * fj, zero))
    a, d = _row_terms(h, (g_i, g_j), hd, (xi, xj), params.gamma, params, sigma)
    return a, d, h, h_pos


def obstacle_row(xi, obs_xy, r_sum, params: BarrierParams, sigma: float, legacy: bool = False):
    """Type-B (or legacy obstacle) row: returns (a (..., 2), d, h, h_pos)."""
    mu = params.mu_b
    dx = xi[..., 0] - obs_xy[..., 0]
    dy = xi[..., 1] - obs_xy[..., 1]
    th, v = xi[..., 2], xi[..., 3]
    h_pos = 0.5 * (dx * dx + dy * dy - r_sum * r_sum)
    zero = _xp.zeros_like(dx)
    if legacy:
        h = h_pos - mu * v * v
        g = (dx, dy, zero, -2 * mu * v)
        hd = (zero, zero - 2 * mu)
    else:
        f, f_g = _heading_first(dx, dy, th, params.normalize_ip)
        h = h_pos + mu * v * f
        g = (dx + mu * v * f_g[0], dy + mu * v * f_g[1], mu * v * f_g[2], mu * f)
        hd = (-mu * v * f, zero)
    a, d = _row_terms(h, (g,), (hd,), (xi,), params.gamma, params, sigma)
    return a, d, h, h_pos


def _heading_first(dx, dy, th, normalize: bool):
    c, s = _xp.cos(th), _xp.sin(th)
    w = dx * c + dy * s
    w_th = -dx * s + dy * c
    if not normalize:
        return w, (c, s, w_th)
    rho2 = dx * dx + dy * dy
    r1 = 1.0 / _xp.sqrt(rho2)
    r3 = r1 / rho2
    return w * r1, (c * r1 - w * dx * r3, s * r1 - w * dy * r3, w_th * r1)
