"""Per-iteration training metrics, constraint-count reports and CSV output.

Violations are counted on every agent pair and every obstacle, not only on
the rows that made it into the QP, so an agent that slips past its r
nearest neighbours still shows up.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from ..dynamics import CONTROL_DIM
from ..barriers import BarrierParams, obstacle_values, pair_values
from ..topology import centralized_counts, local_row_count

METRIC_COLUMNS = ("iter", "loss", "frac_h_violation", "frac_hpos_violation", "mean_terminal_dist",
                  "mean_admm_iters")


@dataclass
class MetricsRecord:
    iter: int
    loss: float
    frac_h_violation: float
    frac_hpos_violation: float
    mean_terminal_dist: float
    mean_admm_iters: float

    def __post_init__(self):
        for name in ("frac_h_violation", "frac_hpos_violation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def row(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]


def violation_flags(states, obstacle_xy, obstacle_radii, r_agent: float, params: BarrierParams):
    """Per-instance (any h < 0, any h_pos < 0) over a state trajectory.

    ``states`` is (T, B, N, 4); ``obstacle_xy`` is (N_o, 2) or (T, N_o, 2)
    for moving obstacles.
    """
    s = np.asarray(states, dtype=float)
    T, B, N, _ = s.shape
    h_bad = np.zeros(B, dtype=bool)
    hp_bad = np.zeros(B, dtype=bool)
    if N > 1:
        i, j = np.triu_indices(N, 1)
        h, hp = pair_values(s[:, :, i], s[:, :, j], r_agent, params)
        h_bad |= (h < 0).any(axis=(0, 2))
        hp_bad |= (hp < 0).any(axis=(0, 2))
    obs = np.asarray(obstacle_xy, dtype=float)
    radii = np.asarray(obstacle_radii, dtype=float).reshape(-1)
    if radii.size:
        obs = np.broadcast_to(obs, (T,) + obs.shape[-2:]) if obs.ndim == 2 else obs
        # (T, B, N, N_o)
        xo = np.broadcast_to(obs[:, None, None], (T, B, N) + obs.shape[-2:])
        xi = np.broadcast_to(s[:, :, :, None], (T, B, N, radii.size, 4))
        h, hp = obstacle_values(xi, xo, r_agent + radii, params)
        h_bad |= (h < 0).any(axis=(0, 2, 3))
        hp_bad |= (hp < 0).any(axis=(0, 2, 3))
    return h_bad, hp_bad


def violation_metrics(states, obstacle_xy, obstacle_radii, r_agent: float, params: BarrierParams):
    """(fraction of instances with any h < 0, fraction with any h_pos < 0)."""
    h_bad, hp_bad = violation_flags(states, obstacle_xy, obstacle_radii, r_agent, params)
    return float(h_bad.mean()), float(hp_bad.mean())


def terminal_distance(final_states, targets) -> float:
    """Mean distance from each agent's final position to its target."""
    s = np.asarray(final_states, dtype=float)
    return float(np.linalg.norm(s[..., :2] - np.asarray(targets, dtype=float), axis=-1).mean())


class MetricsWriter:
    """Append-only CSV with a fixed header; floats written with repr so
    repeated runs compare byte for byte."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(METRIC_COLUMNS)

    def write(self, rec: MetricsRecord):
        self._w.writerow([rec.iter] + [repr(float(x)) for x in rec.row()[1:]])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(int(r["iter"]), *(float(r[c]) for c in METRIC_COLUMNS[1:])) for r in rows]


def constraint_counts(task_factory, sizes) -> list[dict]:
    """Per-agent rows, per-agent KKT size and centralized rows for each N.

    ``task_factory(N)`` returns a TaskSpec; its own r/extras are used for the
    local count, the centralized count is the pairwise-plus-obstacle total.
    """
    out = []
    for N in sizes:
        task = task_factory(N)
        K = local_row_count(task.r, task.n_obstacles, task.extras)
        L = task.r + 1
        out.append(dict(N=N, r=task.r, n_obstacles=task.n_obstacles, per_agent_rows=K,
                        per_agent_kkt=CONTROL_DIM * L + K, centralized_rows=centralized_counts(N, task.n_obstacles)))
    return out
