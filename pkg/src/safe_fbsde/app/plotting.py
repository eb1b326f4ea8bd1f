"""Static figures from the files a run leaves behind.

Everything reads the CSV/JSON outputs, so figures can be regenerated for
old runs without rerunning them.  Rendering uses the non-interactive Agg
backend.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import read_metrics  # noqa: E402


def _moving_average(x, w: int):
    x = np.asarray(x, dtype=float)
    if w <= 1 or x.size < w:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    head = c[1:w] / np.arange(1, w)
    return np.concatenate([head, (c[w:] - c[:-w]) / w])


def plot_training(metrics_csv, out_png, window: int = 10) -> Path:
    """Loss, terminal distance and violation fractions against iteration."""
    recs = read_metrics(metrics_csv)
    it = np.array([r.iter for r in recs])
    fig, ax = plt.subplots(2, 2, figsize=(10, 7))
    series = (("loss", "terminal loss", True), ("mean_terminal_dist", "mean terminal distance", False),
              ("frac_h_violation", "fraction with h < 0", False),
              ("frac_hpos_violation", "fraction with h_pos < 0", False))
    for a, (key, title, logy) in zip(ax.ravel(), series):
        y = np.array([getattr(r, key) for r in recs])
        a.plot(it, y, lw=0.6, alpha=0.4, color="C0")
        a.plot(it, _moving_average(y, window), lw=1.5, color="C0")
        a.set_title(title)
        a.set_xlabel("iteration")
        if logy and np.all(y > 0):
            a.set_yscale("log")
        if key.startswith("frac"):
            a.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_trajectories(traj_json, out_png, instances: int = 4) -> Path:
    """xy paths of the first few batch instances with obstacles and targets."""
    doc = json.loads(Path(traj_json).read_text())
    data = doc["instances"][:instances]
    fig, axes = plt.subplots(1, len(data), figsize=(4 * len(data), 4), squeeze=False)
    obs = np.asarray(doc["obstacles"], dtype=float)  # (T, N_o, 2)
    radii = np.asarray(doc["obstacle_radii"], dtype=float)
    targets = np.asarray(doc["targets"], dtype=float)
    for k, (a, inst) in enumerate(zip(axes[0], data)):
        xy = np.asarray([[agent[:2] for agent in step] for step in inst], dtype=float)  # (T, N, 2)
        for i in range(xy.shape[1]):
            a.plot(xy[:, i, 0], xy[:, i, 1], color=f"C{i % 10}", lw=1.2)
            a.plot(*xy[0, i], "o", color=f"C{i % 10}", ms=4)
            a.add_patch(plt.Circle(xy[-1, i], doc["r_agent"], color=f"C{i % 10}", alpha=0.4))
            a.plot(*targets[i], "x", color=f"C{i % 10}", ms=7)
        if obs.size:
            for o in range(obs.shape[1]):
                if not np.allclose(obs[0, o], obs[-1, o]):
                    a.plot(obs[:, o, 0], obs[:, o, 1], ":", color="0.4", lw=1)
                a.add_patch(plt.Circle(obs[-1, o], radii[o], color="0.3", alpha=0.5))
        a.set_aspect("equal")
        a.set_title(f"instance {k}")
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_solver_trace(trace_csv, out_png) -> Path:
    """Residuals and penalties of one traced solve, log scale."""
    with open(trace_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    fig, ax = plt.subplots(1, 2, figsize=(10, 4))
    if rows:
        it = np.array([float(r["iter"]) for r in rows])
        for key in ("r_pri_1", "r_pri_2", "r_dual_1", "r_dual_2"):
            ax[0].semilogy(it, np.maximum([float(r[key]) for r in rows], 1e-16), label=key)
        for key in ("rho", "mu"):
            ax[1].semilogy(it, [float(r[key]) for r in rows], label=key)
    for a, title in zip(ax, ("residuals", "penalties")):
        a.set_title(title)
        a.set_xlabel("iteration")
        a.legend(loc="best", fontsize=8)
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_constraint_counts(rows: list, out_png) -> Path:
    """Per-agent sizes stay flat while the centralized row count grows."""
    N = [r["N"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(N, [r["centralized_rows"] for r in rows], "o-", label="centralized rows")
    ax.plot(N, [r["per_agent_rows"] for r in rows], "s-", label="per-agent rows")
    ax.plot(N, [r["per_agent_kkt"] for r in rows], "^-", label="per-agent KKT size")
    ax.set_xlabel("agents N")
    ax.set_yscale("log")
    ax.legend(loc="best")
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_train(run_dir) -> list[Path]:
    d = Path(run_dir)
    return [plot_training(d / "metrics.csv", d / "training.png")]


def render_eval(run_dir) -> list[Path]:
    d = Path(run_dir)
    return [plot_trajectories(d / "trajectories.json", d / "trajectories.png"),
            plot_solver_trace(d / "solver_trace.csv", d / "solver_trace.png")]


def render_bench(run_dir) -> list[Path]:
    d = Path(run_dir)
    rows = json.loads((d / "constraint_counts.json").read_text())
    return [plot_constraint_counts(rows, d / "constraint_counts.png")]
