"""Benchmark task geometries and their quadratic running/terminal costs.

Obstacle positions and radii are eyeballed approximations of the published
figures, not measured values.  Task barriers use a sharper gamma than the
library default: the SCBF condition with 0 < beta < alpha keeps h above
ln(alpha / beta) / gamma, and gamma = 1 would hold agents more than a metre
away from every obstacle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..barriers import BarrierParams
from ..dynamics import NoiseModel
from ..topology import ExtraConstraints, local_row_count

TASK_NAMES = ("swap", "swap_asym", "bottleneck", "moving_obstacle", "formation")
TASK_GAMMA = 5.0
# start headings on the circle tasks are rotated this far off the centre
# direction so all agents share a turning sense; aimed exactly at the centre
# the filtered policy stalls in front of the obstacle
HEADING_OFFSET = 0.4


@dataclass
class TaskSpec:
    name: str
    n_agents: int
    start: np.ndarray  # (N, 4) nominal initial states
    targets_final: np.ndarray  # (N, 2)
    obstacle_xy: np.ndarray  # (N_o, 2) at tau = 0
    obstacle_radii: np.ndarray  # (N_o,)
    r: int = 3
    extras: ExtraConstraints = field(default_factory=ExtraConstraints)
    barrier: BarrierParams = field(default_factory=lambda: BarrierParams(gamma=TASK_GAMMA))
    noise: NoiseModel = field(default_factory=lambda: NoiseModel(0.1, 0.2, 30))
    r_agent: float = 0.2
    w_p: float = 0.05
    w_v: float = 0.05
    W_p: float = 5.0
    W_v: float = 0.5
    r_u: float = 0.5
    init_noise: float = 0.1  # std of the initial position jitter
    targets_phase1: np.ndarray | None = None  # (N, 2) before the phase switch
    phase_fraction: float = 0.8
    obstacle_velocity: np.ndarray | None = None  # (N_o, 2) per second

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.targets_final = np.asarray(self.targets_final, dtype=float)
        self.obstacle_xy = np.asarray(self.obstacle_xy, dtype=float).reshape(-1, 2)
        self.obstacle_radii = np.asarray(self.obstacle_radii, dtype=float).reshape(-1)
        if self.start.shape != (self.n_agents, 4) or self.targets_final.shape != (self.n_agents, 2):
            raise ValueError("start states and targets need one row per agent")
        if len(self.obstacle_radii) != len(self.obstacle_xy):
            raise ValueError("one radius per obstacle")
        if not 0.0 <= self.phase_fraction <= 1.0:
            raise ValueError("phase_fraction must lie in [0, 1]")
        if not 0 <= self.r < self.n_agents:
            raise ValueError(f"r={self.r} needs 0 <= r < N={self.n_agents}")

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacle_xy)

    @property
    def R(self) -> np.ndarray:
        return self.r_u * np.eye(2)

    @property
    def phase_step(self) -> int:
        return int(round(self.phase_fraction * self.noise.horizon_steps))

    @property
    def rows_per_agent(self) -> int:
        return local_row_count(self.r, self.n_obstacles, self.extras)

    def targets(self, tau: int) -> np.ndarray:
        if self.targets_phase1 is not None and tau < self.phase_step:
            return np.asarray(self.targets_phase1, dtype=float)
        return self.targets_final

    def obstacles(self, tau: int) -> np.ndarray:
        if self.obstacle_velocity is None:
            return self.obstacle_xy
        return self.obstacle_xy + np.asarray(self.obstacle_velocity) * tau * self.noise.dt

    def initial_states(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        out = np.broadcast_to(self.start, (batch,) + self.start.shape).copy()
        if self.init_noise > 0:
            out[..., :2] += self.init_noise * rng.standard_normal(out[..., :2].shape)
        return out

    def running_cost(self, states, tau: int):
        """q_i = w_p |pos - target(tau)|^2 + w_v v^2 for every agent."""
        return _quadratic(states, self.targets(tau), self.w_p, self.w_v)

    def terminal_cost(self, states):
        """phi_i = W_p |pos - final target|^2 + W_v v^2."""
        return _quadratic(states, self.targets_final, self.W_p, self.W_v)


def _quadratic(states, target, w_pos, w_vel):
    lib_t = not isinstance(states, np.ndarray)
    if lib_t:
        import torch
        tgt = torch.as_tensor(target, dtype=states.dtype)
    else:
        states = np.asarray(states, dtype=float)
        tgt = np.asarray(target, dtype=float)
    diff = states[..., :2] - tgt
    return w_pos * (diff * diff).sum(-1) + w_vel * states[..., 3] * states[..., 3]


def running_cost(task: TaskSpec, s_i, target_i=None, tau: int = 0):
    s_i = np.asarray(s_i, dtype=float)
    tgt = task.targets(tau) if target_i is None else target_i
    return _quadratic(s_i, tgt, task.w_p, task.w_v)


def terminal_cost(task: TaskSpec, s_i, target_i=None):
    s_i = np.asarray(s_i, dtype=float)
    tgt = task.targets_final if target_i is None else target_i
    return _quadratic(s_i, tgt, task.W_p, task.W_v)


def _circle(n, radius, phase=0.0):
    ang = phase + 2 * np.pi * np.arange(n) / n
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1), ang


def _states(pos, heading):
    out = np.zeros((len(pos), 4))
    out[:, :2] = pos
    out[:, 2] = heading
    return out


def make_task(name: str, scale: int | None = None, **overrides) -> TaskSpec:
    """Deterministic geometry for one of the benchmark tasks.

    ``scale`` is the number of agents; keyword overrides go straight into
    the TaskSpec (e.g. ``noise=NoiseModel(...)``).
    """
    if name not in TASK_NAMES:
        raise ValueError(f"unknown task {name!r}; choose from {', '.join(TASK_NAMES)}")
    if name in ("swap", "swap_asym"):
        n = scale or 4
        pos, ang = _circle(n, 2.0)
        kw = dict(start=_states(pos, ang + np.pi + HEADING_OFFSET), targets_final=-pos)
        if name == "swap":
            kw.update(obstacle_xy=[[0.0, 0.0]], obstacle_radii=[0.3])
        else:
            kw.update(obstacle_xy=[[0.0, 0.0], [0.9, 0.7], [0.4, 1.2]], obstacle_radii=[0.3, 0.25, 0.25],
                      extras=ExtraConstraints(True, True))
    elif name == "moving_obstacle":
        n = scale or 8
        pos, ang = _circle(n, 2.0, phase=np.pi / n)
        kw = dict(start=_states(pos, ang + np.pi + HEADING_OFFSET), targets_final=-pos, obstacle_xy=[[0.0, -3.0]],
                  obstacle_radii=[0.3], obstacle_velocity=[[0.0, 1.2]], extras=ExtraConstraints(True, False))
    elif name == "bottleneck":
        n = scale or 8
        if n % 2:
            raise ValueError("bottleneck needs an even number of agents (two columns)")
        half = n // 2
        ys = np.linspace(-1.5, 1.5, half)
        near = np.stack([np.full(half, -2.5), ys], axis=1)
        far = np.stack([np.full(half, -3.2), ys], axis=1)
        start = np.concatenate([near, far])
        goal = np.concatenate([far * [-1, 1], near * [-1, 1]])
        phase1 = np.concatenate([np.tile([3.0, 0.0], (half, 1)), np.tile([1.0, 0.0], (half, 1))])
        wall_y = np.array([-1.8, -1.2, -0.6, 0.6, 1.2, 1.8])
        kw = dict(start=_states(start, 0.0), targets_final=goal, targets_phase1=phase1,
                  obstacle_xy=np.stack([np.zeros(6), wall_y], axis=1), obstacle_radii=np.full(6, 0.25))
    else:  # formation
        n = scale or 4
        xs = np.linspace(-1.5, 1.5, n)
        start = np.stack([xs, np.full(n, -2.5)], axis=1)
        kw = dict(start=_states(start, np.pi / 2), targets_final=_rectangle(n, 2.0, 1.0, (0.0, 2.0)),
                  obstacle_xy=[[0.0, 0.0]], obstacle_radii=[0.3], extras=ExtraConstraints(True, False))
    kw["r"] = min(3, n - 1)
    kw.update(overrides)
    return TaskSpec(name=name, n_agents=n, **kw)


def _rectangle(n, width, height, center):
    """n points spread evenly along the perimeter of a rectangle, corners first."""
    cx, cy = center
    w, h = width / 2, height / 2
    corners = np.array([[-w, -h], [w, -h], [w, h], [-w, h]])
    if n <= 4:
        return corners[:n] + center
    per = 2 * (width + height)
    s = np.arange(n) * per / n
    pts = []
    for t in s:
        if t < width:
            pts.append([-w + t, -h])
        elif t < width + height:
            pts.append([w, -h + t - width])
        elif t < 2 * width + height:
            pts.append([w - (t - width - height), h])
        else:
            pts.append([-w, h - (t - 2 * width - height)])
    return np.asarray(pts) + [cx, cy]
