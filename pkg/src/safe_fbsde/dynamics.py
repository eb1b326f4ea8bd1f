"""Unicycle agents driven by an Euler-Maruyama stepper.

Each agent carries the state ``[x, y, theta, v]`` and the control
``[u_theta, u_v]``::

    dx = v cos(theta) dt
    dy = v sin(theta) dt
    dtheta = v u_theta dt + sigma dw_theta
    dv = u_v dt + sigma dw_v

Noise only enters the heading and speed channels, so a noise draw is two
numbers per agent.  Headings are never wrapped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import _xp

STATE_DIM = 4
CONTROL_DIM = 2
NOISE_DIM = 2
NOISY_CHANNELS = (2, 3)


class AgentState(NamedTuple):
    x: float
    y: float
    theta: float
    v: float


class ControlInput(NamedTuple):
    u_theta: float
    u_v: float


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.1
    dt: float = 0.1
    horizon_steps: int = 100

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if int(self.horizon_steps) < 1:
            raise ValueError(f"horizon_steps must be >= 1, got {self.horizon_steps}")

    @property
    def horizon(self) -> float:
        return self.dt * self.horizon_steps


@dataclass
class GlobalState:
    """Stacked agent states.

    ``states`` has shape ``(N, 4)`` for a single instance or ``(B, N, 4)``
    for a batch of independent instances.
    """

    states: np.ndarray
    time_index: int = 0
    _n: int = field(init=False, repr=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim not in (2, 3) or self.states.shape[-1] != STATE_DIM:
            raise ValueError(f"states must be (N, 4) or (B, N, 4), got {self.states.shape}")
        if self.states.shape[-2] < 1:
            raise ValueError("need at least one agent")
        self._n = self.states.shape[-2]

    @classmethod
    def from_agents(cls, agents: Sequence[AgentState], time_index: int = 0) -> "GlobalState":
        return cls(np.array([tuple(a) for a in agents], dtype=float), time_index)

    @property
    def n_agents(self) -> int:
        return self._n

    @property
    def batched(self) -> bool:
        return self.states.ndim == 3

    @property
    def agents(self) -> list[AgentState]:
        if self.batched:
            raise ValueError("agents is only defined for an unbatched state")
        return [AgentState(*map(float, row)) for row in self.states]


def drift(s):
    """f(x) = [v cos(theta), v sin(theta), 0, 0] for states of shape (..., 4)."""
    s = s if _xp.is_torch(s) else np.asarray(s, dtype=float)
    theta, v = s[..., 2], s[..., 3]
    zero = _xp.zeros_like(v)
    return _xp.stack([v * _xp.cos(theta), v * _xp.sin(theta), zero, zero])


def actuation(s):
    """G(x) with rows [0 0; 0 0; v 0; 0 1], shape (..., 4, 2)."""
    s = s if _xp.is_torch(s) else np.asarray(s, dtype=float)
    v = s[..., 3]
    zero = _xp.zeros_like(v)
    one = _xp.ones_like(v)
    col0 = _xp.stack([zero, zero, v, zero])
    col1 = _xp.stack([zero, zero, zero, one])
    return _xp.stack([col0, col1], axis=-1)


def diffusion(sigma: float) -> np.ndarray:
    """The two live columns of Sigma_i, shape (4, 2)."""
    out = np.zeros((STATE_DIM, NOISE_DIM))
    out[2, 0] = sigma
    out[3, 1] = sigma
    return out


def state_derivative(s, u):
    """Deterministic part f(x) + G(x) u of the dynamics."""
    G = actuation(s)
    u = u if _xp.is_torch(u) else np.asarray(u, dtype=float)
    return drift(s) + (G @ u[..., None])[..., 0]


def step_arrays(states, controls, eps, sigma: float, dt: float):
    """One Euler-Maruyama step on raw arrays of shape (..., N, 4).

    Works on numpy arrays and torch tensors alike; ``eps`` has shape
    (..., N, 2) and feeds the heading and speed channels.
    """
    theta, v = states[..., 2], states[..., 3]
    u_th, u_v = controls[..., 0], controls[..., 1]
    noise_scale = sigma * float(np.sqrt(dt))
    return _xp.stack(
        [
            states[..., 0] + v * _xp.cos(theta) * dt,
            states[..., 1] + v * _xp.sin(theta) * dt,
            theta + v * u_th * dt + noise_scale * eps[..., 0],
            v + u_v * dt + noise_scale * eps[..., 1],
        ]
    )


def em_step(g: GlobalState, u, noise, model: NoiseModel) -> GlobalState:
    """Advance ``g`` by one step of length ``model.dt``.

    ``u`` is a list of ControlInput (unbatched) or an array of shape
    (..., N, 2); ``noise`` holds standard-normal draws of the same shape.
    """
    u = np.asarray([tuple(c) for c in u] if isinstance(u, list) else u, dtype=float)
    eps = np.asarray(noise, dtype=float)
    expected = g.states.shape[:-1] + (CONTROL_DIM,)
    if u.shape != expected:
        raise ValueError(f"controls must have shape {expected}, got {u.shape}")
    if eps.shape != expected:
        raise ValueError(f"noise must have shape {expected}, got {eps.shape}")
    for name, arr in (("state", g.states), ("control", u), ("noise", eps)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite {name} passed to em_step")
    nxt = step_arrays(g.states, u, eps, model.sigma, model.dt)
    return GlobalState(nxt, g.time_index + 1)


def global_drift(states: np.ndarray) -> np.ndarray:
    """Stacked f = [f_1; ...; f_N] for an (N, 4) state array."""
    return drift(states).reshape(-1)


def global_actuation(states: np.ndarray) -> np.ndarray:
    """Block-diagonal G = bdiag(G_1, ..., G_N) of shape (4N, 2N)."""
    blocks = actuation(states)
    n = blocks.shape[0]
    out = np.zeros((STATE_DIM * n, CONTROL_DIM * n))
    for i in range(n):
        out[4 * i:4 * i + 4, 2 * i:2 * i + 2] = blocks[i]
    return out
