"""Deep FBSDE learner: value-gradient network, rollout of the discretized
forward/backward SDE pair through the safety layer, loss and Adam.

The value gradient of every agent comes from one shared feed-forward network
applied to that agent's local observation.  Gradients of the terminal loss
are obtained by reverse-mode differentiation of the unrolled rollout; the
only hand-written backward is the one of the QP layer.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .dynamics import CONTROL_DIM, STATE_DIM, step_arrays
from .safe_layer import LayerContext, safe_controls
from .solver import SolverConfig
from .topology import _gather, assemble_batch, neighbor_indices

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DTYPE = torch.float64


# --- model ------------------------------------------------------------------------

def observation_dim(n_obstacles: int, r: int) -> int:
    return 3 + 2 + 2 * n_obstacles + 5 * r + 1


@dataclass
class ValueModel:
    """Shared per-agent value-gradient network plus an initial-value head."""

    params: dict
    out_scale: float = 1.0
    value_scale: float = 1.0

    LAYERS = ("W1", "b1", "W2", "b2", "W3", "b3")
    HEAD = ("H1", "c1", "H2", "c2")

    @classmethod
    def create(cls, obs_dim: int, hidden: int = 64, head_hidden: int = 32, seed: int = 0,
               out_scale: float = 1.0, value_scale: float = 1.0, last_gain: float = 0.1) -> "ValueModel":
        rng = np.random.default_rng(seed)

        def glorot(n_in, n_out, gain=1.0):
            return rng.normal(0.0, gain * math.sqrt(2.0 / (n_in + n_out)), (n_in, n_out))

        arrays = {
            "W1": glorot(obs_dim, hidden), "b1": np.zeros(hidden),
            "W2": glorot(hidden, hidden), "b2": np.zeros(hidden),
            "W3": glorot(hidden, STATE_DIM, last_gain), "b3": np.zeros(STATE_DIM),
            "H1": glorot(obs_dim, head_hidden), "c1": np.zeros(head_hidden),
            "H2": glorot(head_hidden, 1, last_gain), "c2": np.zeros(1),
        }
        return cls.from_arrays(arrays, out_scale, value_scale)

    @classmethod
    def from_arrays(cls, arrays: dict, out_scale: float = 1.0, value_scale: float = 1.0) -> "ValueModel":
        params = {k: torch.tensor(np.asarray(v, dtype=float), dtype=DTYPE, requires_grad=True)
                  for k, v in arrays.items()}
        return cls(params, out_scale, value_scale)

    def parameters(self) -> list:
        return [self.params[k] for k in self.LAYERS + self.HEAD]

    def names(self) -> list:
        return list(self.LAYERS + self.HEAD)

    def arrays(self) -> dict:
        return {k: v.detach().numpy().copy() for k, v in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def value_forward(model: ValueModel, obs):
    """dV/dx_i for every observation row; obs (..., D) -> (..., 4)."""
    P = model.params
    x = obs if torch.is_tensor(obs) else torch.as_tensor(np.asarray(obs, dtype=float), dtype=DTYPE)
    h = torch.tanh(x @ P["W1"] + P["b1"])
    h = torch.tanh(h @ P["W2"] + P["b2"])
    return model.out_scale * (h @ P["W3"] + P["b3"])


def initial_value(model: ValueModel, obs):
    """V(x(0), 0) as the sum of per-agent head outputs; obs (..., N, D) -> (...)."""
    P = model.params
    h = torch.tanh(obs @ P["H1"] + P["c1"])
    return (model.value_scale * (h @ P["H2"] + P["c2"]))[..., 0].sum(-1)


def build_observation(states, nbr, targets, obstacles, t_frac: float):
    """Local observation of every agent.

    [cos th, sin th, v, target - pos, obstacle_o - pos..., for each neighbour
    (p_j - p_i, cos th_j, sin th_j, v_j), t / T]
    """
    pos = states[..., :2]
    th, v = states[..., 2], states[..., 3]
    tgt = torch.as_tensor(targets, dtype=states.dtype)
    parts = [torch.cos(th)[..., None], torch.sin(th)[..., None], v[..., None], tgt - pos]
    if obstacles is not None and len(obstacles):
        obs = torch.as_tensor(np.asarray(obstacles, dtype=float), dtype=states.dtype)
        parts.append((obs[None, None] - pos[..., None, :]).reshape(*pos.shape[:-1], -1))
    if nbr.shape[-1]:
        nb = _gather(states, nbr)  # (B, N, r, 4)
        rel = nb[..., :2] - pos[..., None, :]
        feat = torch.cat([rel, torch.cos(nb[..., 2:3]), torch.sin(nb[..., 2:3]), nb[..., 3:4]], dim=-1)
        parts.append(feat.reshape(*pos.shape[:-1], -1))
    parts.append(torch.full(pos.shape[:-1] + (1,), float(t_frac), dtype=states.dtype))
    return torch.cat(parts, dim=-1)


def hamiltonian_linear_term(dVdx, G):
    """p_i = G_i' dV/dx_i."""
    if torch.is_tensor(dVdx):
        return (G.transpose(-1, -2) @ dVdx[..., None])[..., 0]
    return np.swapaxes(np.asarray(G), -1, -2) @ np.asarray(dVdx)


def bsde_step(V, q, u, dVdx, R, sigma: float, eps, dt: float):
    """V <- V - (sum_i q_i + 0.5 u_i' R u_i) dt + dV/dx' Sigma sqrt(dt) eps.

    q (..., N), u (..., N, 2), dVdx (..., N, 4), eps (..., N, 2).
    """
    lib = torch if torch.is_tensor(u) else np
    R = torch.as_tensor(R, dtype=u.dtype) if lib is torch else np.asarray(R, dtype=float)
    quad = ((u @ R) * u).sum(-1)
    running = (q + 0.5 * quad).sum(-1)
    noise = (dVdx[..., 2] * eps[..., 0] + dVdx[..., 3] * eps[..., 1]).sum(-1)
    return V - running * dt + sigma * math.sqrt(dt) * noise


def terminal_loss(V_T, phi_sum):
    return ((V_T - phi_sum) ** 2).mean()


# --- rollout ----------------------------------------------------------------------

@dataclass(frozen=True)
class LearnerConfig:
    hidden: int = 64
    head_hidden: int = 32
    out_scale: float = 1.0
    value_scale: float = 1.0
    lr: float = 1e-3
    batch: int = 32
    straight_through_state: bool = False
    safe: bool = True  # False drops the QP layer (u = -R^-1 p)
    # weight of the realized total cost added to the training objective; 0 trains on
    # the terminal-value loss alone
    cost_weight: float = 0.0


@dataclass
class Rollout:
    states: list = field(default_factory=list)  # tensors (B, N, 4), length H + 1
    values: list = field(default_factory=list)  # tensors (B,), length H + 1
    dVdx: list = field(default_factory=list)
    p: list = field(default_factory=list)
    u: list = field(default_factory=list)
    noise: list = field(default_factory=list)
    layers: list = field(default_factory=list)
    h_min: list = field(default_factory=list)  # per step (B,) min h over local rows
    phi: object = None
    loss: object = None  # terminal-value loss
    cost: object = None  # (B,) realized running + terminal cost
    objective: object = None  # what backward differentiates
    admm_iters: list = field(default_factory=list)
    unconverged: int = 0
    degraded: int = 0


def rollout(model: ValueModel, init_states, task, solver_config: SolverConfig = SolverConfig(),
            seed=0, config: LearnerConfig = LearnerConfig(), noise=None) -> Rollout:
    """Unroll the discretized FBSDE for ``task.noise.horizon_steps`` steps.

    ``seed`` may be an int or a numpy Generator; ``noise`` optionally fixes
    the standard-normal draws (H, B, N, 2).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    nm = task.noise
    H, dt, sigma = nm.horizon_steps, nm.dt, nm.sigma
    states = torch.as_tensor(np.array(init_states, dtype=float), dtype=DTYPE)
    if states.ndim == 2:
        states = states[None]
    B, N, _ = states.shape
    r = task.r
    R = np.asarray(task.R, dtype=float)
    ego = np.broadcast_to(np.arange(N), (B, N))
    out = Rollout()
    nbr = neighbor_indices(states.detach().numpy()[..., :2], r)
    obs0 = build_observation(states, nbr, task.targets(0), task.obstacles(0), 0.0)
    V = initial_value(model, obs0)
    out.states.append(states)
    out.values.append(V)
    warm = None
    running = torch.zeros(B, dtype=DTYPE)
    R_t = torch.as_tensor(R, dtype=DTYPE)
    for tau in range(H):
        if tau > 0:
            nbr = neighbor_indices(states.detach().numpy()[..., :2], r)
        obstacles = task.obstacles(tau)
        obs = build_observation(states, nbr, task.targets(tau), obstacles, tau / H)
        dVdx = value_forward(model, obs)
        p = torch.stack([states[..., 3] * dVdx[..., 2], dVdx[..., 3]], dim=-1)
        if config.safe:
            src = states.detach() if config.straight_through_state else states
            obs_t = None if obstacles is None or len(obstacles) == 0 else torch.as_tensor(obstacles, dtype=DTYPE)
            asm = assemble_batch(src, ego, nbr, obs_t, task.obstacle_radii, task.r_agent, task.barrier,
                                 sigma, task.extras)
            lctx = LayerContext(R, nbr, solver_config, warm)
            u = safe_controls(p, asm.A, asm.d, lctx)
            warm = lctx.result.state
            out.layers.append(lctx)
            out.admm_iters.append(lctx.result.iters)
            out.unconverged += int((~lctx.result.converged).sum())
            out.h_min.append(asm.h.detach().reshape(B, -1).min(dim=1).values.numpy()
                             if asm.h.shape[-1] else np.full(B, np.inf))
        else:
            u = -p @ torch.as_tensor(np.linalg.inv(R).T, dtype=DTYPE)
        eps = rng.standard_normal((B, N, CONTROL_DIM)) if noise is None else np.asarray(noise[tau])
        eps_t = torch.as_tensor(eps, dtype=DTYPE)
        q = task.running_cost(states, tau)
        running = running + (q + 0.5 * ((u @ R_t) * u).sum(-1)).sum(-1) * dt
        V = bsde_step(V, q, u, dVdx, R, sigma, eps_t, dt)
        states = step_arrays(states, u, eps_t, sigma, dt)
        out.states.append(states)
        out.values.append(V)
        out.dVdx.append(dVdx)
        out.p.append(p)
        out.u.append(u)
        out.noise.append(eps)
    out.phi = task.terminal_cost(states).sum(-1)
    out.loss = terminal_loss(V, out.phi)
    out.cost = running + out.phi
    out.objective = out.loss + config.cost_weight * out.cost.mean() if config.cost_weight else out.loss
    return out


def backward(roll: Rollout, model: ValueModel) -> list:
    """Reverse-mode sweep from the training objective to the model parameters."""
    model.zero_grad()
    (roll.loss if roll.objective is None else roll.objective).backward()
    roll.degraded = sum(l.degraded for l in roll.layers)
    return [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            for p in model.parameters()]


# --- Adam ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        z = [torch.zeros_like(p.detach()) if torch.is_tensor(p) else np.zeros_like(p) for p in params]
        return cls([x.clone() if torch.is_tensor(x) else x.copy() for x in z], z, **kw)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; returns (new_params, state).

    A step with any non-finite gradient is skipped and counted.
    """
    finite = all(bool(torch.isfinite(g).all()) if torch.is_tensor(g) else bool(np.all(np.isfinite(g)))
                 for g in grads)
    if not finite:
        state.skipped += 1
        log.warning("non-finite gradient, Adam step skipped (%d so far)", state.skipped)
        return list(params), state
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = []
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        root = torch.sqrt(vhat) if torch.is_tensor(vhat) else np.sqrt(vhat)
        new.append(p - state.lr * mhat / (root + state.eps))
    return new, state


def apply_adam(model: ValueModel, grads, state: AdamState):
    with torch.no_grad():
        vals = [p.detach() for p in model.parameters()]
        new, state = adam_step(vals, grads, state)
        for p, n in zip(model.parameters(), new):
            p.copy_(n)
    return state


# --- checkpoints ----------------------------------------------------------------------

def save_checkpoint(model: ValueModel, path, meta: dict | None = None):
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "out_scale": model.out_scale,
        "value_scale": model.value_scale,
        "meta": meta or {},
        "params": {k: {"shape": list(v.shape), "data": [float(x) for x in v.reshape(-1)]}
                   for k, v in model.arrays().items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> ValueModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    arrays = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc["params"].items()}
    missing = set(ValueModel.LAYERS + ValueModel.HEAD) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
    return ValueModel.from_arrays(arrays, doc.get("out_scale", 1.0), doc.get("value_scale", 1.0))
