"""Run drivers behind the CLI subcommands.

Each driver takes a RunConfig and an output directory, writes its files
there (the resolved config first) and returns a small summary dict.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .. import learner as L
from ..solver import DecentralizedProblem, VERIFY_CONFIG, solve_decentralized, write_trace
from ..topology import assemble_batch, neighbor_indices
from . import suite
from .config import ConfigError, NumericalError, RunConfig, dump_config
from .metrics import MetricsRecord, MetricsWriter, constraint_counts, terminal_distance, violation_metrics
from .tasks import make_task

log = logging.getLogger(__name__)

# independent streams per purpose, all derived from the run seed
TRAIN_STREAM, EVAL_STREAM = 1, 2


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def _prepare(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    torch.use_deterministic_algorithms(True)
    return out


def _model(cfg: RunConfig, task, checkpoint=None) -> L.ValueModel:
    if checkpoint is not None:
        try:
            return L.load_checkpoint(checkpoint)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load checkpoint {checkpoint}: {exc}") from exc
    return L.ValueModel.create(L.observation_dim(task.n_obstacles, task.r), cfg.hidden, cfg.head_hidden,
                               seed=cfg.seed, out_scale=cfg.out_scale, value_scale=cfg.value_scale)


def rollout_record(it: int, roll: L.Rollout, task) -> MetricsRecord:
    """Metrics row for one batch rollout."""
    loss = float(roll.loss.detach())
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss at iteration {it}")
    states = torch.stack(roll.states).detach().numpy()
    H = states.shape[0] - 1
    obs = np.stack([task.obstacles(t) for t in range(H + 1)])
    frac_h, frac_hp = violation_metrics(states, obs, task.obstacle_radii, task.r_agent, task.barrier)
    admm = float(np.mean(np.stack(roll.admm_iters))) if roll.admm_iters else 0.0
    return MetricsRecord(it, loss, frac_h, frac_hp, terminal_distance(states[-1], task.targets_final), admm)


def run_train(cfg: RunConfig, out_dir, checkpoint=None, max_iters: int | None = None, plots: bool = False) -> dict:
    """Train the value-gradient network; writes metrics.csv and checkpoint.json."""
    out = _prepare(cfg, out_dir)
    task = cfg.build_task()
    model = _model(cfg, task, checkpoint)
    lcfg = cfg.learner_config()
    scfg = cfg.solver_config()
    adam = L.AdamState.zeros_like(model.parameters(), lr=cfg.lr)
    rng = _rng(cfg.seed, TRAIN_STREAM)
    iters = cfg.iters if max_iters is None else min(int(max_iters), cfg.iters)
    meta = dict(task=cfg.task, n_agents=task.n_agents, seed=cfg.seed)
    t0 = time.perf_counter()
    first = last = None
    with MetricsWriter(out / "metrics.csv") as mw:
        for it in range(iters):
            roll = L.rollout(model, task.initial_states(cfg.batch, rng), task, scfg, rng, lcfg)
            rec = rollout_record(it, roll, task)
            grads = L.backward(roll, model)
            adam = L.apply_adam(model, grads, adam)
            mw.write(rec)
            first = first or rec
            last = rec
            if cfg.log_every and it % cfg.log_every == 0:
                log.info("iter %d loss %.4g dist %.3f h %.2f hpos %.2f admm %.1f (%.0fs)", it, rec.loss,
                         rec.mean_terminal_dist, rec.frac_h_violation, rec.frac_hpos_violation,
                         rec.mean_admm_iters, time.perf_counter() - t0)
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                L.save_checkpoint(model, out / "checkpoint.json", dict(meta, iter=it + 1))
    L.save_checkpoint(model, out / "checkpoint.json", dict(meta, iter=iters))
    if adam.skipped:
        log.warning("%d Adam steps skipped on non-finite gradients", adam.skipped)
    summary = dict(iters=iters, seconds=time.perf_counter() - t0, skipped_steps=adam.skipped,
                   first=first.row() if first else None, last=last.row() if last else None)
    if plots:
        from . import plotting
        summary["plots"] = [str(p) for p in plotting.render_train(out)]
    return summary


def run_eval(cfg: RunConfig, out_dir, checkpoint=None, plots: bool = False) -> dict:
    """One batch rollout of a (possibly fresh) model; writes trajectories.json,
    metrics.csv and the solver trace of the first safety-layer solve."""
    out = _prepare(cfg, out_dir)
    task = cfg.build_task()
    model = _model(cfg, task, checkpoint)
    scfg = cfg.solver_config()
    rng = _rng(cfg.seed, EVAL_STREAM)
    init = task.initial_states(cfg.batch, rng)
    with torch.no_grad():
        roll = L.rollout(model, init, task, scfg, rng, cfg.learner_config())
    rec = rollout_record(0, roll, task)
    with MetricsWriter(out / "metrics.csv") as mw:
        mw.write(rec)

    states = torch.stack(roll.states).numpy()  # (H+1, B, N, 4)
    u = torch.stack(roll.u).numpy()  # (H, B, N, 2)
    u = np.concatenate([u, np.full_like(u[:1], np.nan)])  # no control after the last step
    H = states.shape[0] - 1
    doc = dict(
        task=cfg.task, dt=task.noise.dt, columns=["x", "y", "theta", "v", "u_theta", "u_v"],
        targets=task.targets_final.tolist(), r_agent=task.r_agent,
        obstacle_radii=task.obstacle_radii.tolist(),
        obstacles=[np.asarray(task.obstacles(t)).tolist() for t in range(H + 1)],
        # [instance][step][agent] -> 6 numbers; the final step carries null controls
        instances=[[[[float(x) for x in states[t, b, i]] + [None if np.isnan(c) else float(c) for c in u[t, b, i]]
                     for i in range(task.n_agents)] for t in range(H + 1)] for b in range(cfg.batch)],
    )
    (out / "trajectories.json").write_text(json.dumps(doc))

    trace_rows = _first_step_trace(model, task, init, cfg)
    write_trace(trace_rows, out / "solver_trace.csv")
    summary = dict(record=rec.row(), trace_iters=len(trace_rows))
    if plots:
        from . import plotting
        summary["plots"] = [str(p) for p in plotting.render_eval(out)]
    return summary


def _first_step_trace(model, task, init, cfg: RunConfig) -> list:
    """Re-solve the step-0 QPs with the reference engine and record residuals.

    The unconstrained shortcut is off here, otherwise a batch that starts
    feasible would leave an empty trace.
    """
    if task.r == 0 and task.rows_per_agent == 0:
        return []
    states = torch.as_tensor(init, dtype=L.DTYPE)
    B, N, _ = states.shape
    nbr = neighbor_indices(init[..., :2], task.r)
    with torch.no_grad():
        obs = L.build_observation(states, nbr, task.targets(0), task.obstacles(0), 0.0)
        dVdx = L.value_forward(model, obs)
        p = torch.stack([states[..., 3] * dVdx[..., 2], dVdx[..., 3]], dim=-1).numpy()
        o = task.obstacles(0)
        asm = assemble_batch(states, np.broadcast_to(np.arange(N), (B, N)), nbr,
                             torch.as_tensor(o, dtype=L.DTYPE) if len(o) else None, task.obstacle_radii,
                             task.r_agent, task.barrier, task.noise.sigma, task.extras)
    R = np.broadcast_to(task.R, (B, N) + task.R.shape)
    prob = DecentralizedProblem(R, p, asm.A.numpy(), asm.d.numpy(), nbr)
    res = solve_decentralized(prob, replace(cfg.solver_config(), shortcut=False), trace=True)
    return res.trace


def run_solvecheck(cfg: RunConfig, out_dir) -> dict:
    """Decentralized solver vs the enumeration oracle on random instances."""
    out = _prepare(cfg, out_dir)
    rep = suite.run_solver_suite(cfg.solvecheck_instances, cfg.seed, VERIFY_CONFIG)
    doc = dict(vars(rep), passed=rep.passed())
    (out / "solvecheck.json").write_text(json.dumps(doc, indent=2) + "\n")
    return doc


def run_gradcheck(cfg: RunConfig, out_dir) -> dict:
    """QP-layer gradients vs finite differences, and the duplicate-row identity."""
    out = _prepare(cfg, out_dir)
    rep = suite.run_grad_suite(cfg.gradcheck_instances, cfg.seed)
    doc = dict(vars(rep), passed=rep.passed())
    (out / "gradcheck.json").write_text(json.dumps(doc, indent=2) + "\n")
    return doc


def run_bench(cfg: RunConfig, out_dir, plots: bool = False) -> dict:
    """Constraint counts of the configured task across team sizes."""
    out = _prepare(cfg, out_dir)

    def factory(N):
        return make_task(cfg.task, N, barrier=cfg.barrier_params(), **cfg.task_overrides)

    rows = constraint_counts(factory, cfg.bench_sizes)
    cols = list(rows[0]) if rows else []
    with open(out / "constraint_counts.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r[c]) for c in cols) + "\n")
    (out / "constraint_counts.json").write_text(json.dumps(rows, indent=2) + "\n")
    summary = dict(rows=rows)
    if plots:
        from . import plotting
        summary["plots"] = [str(p) for p in plotting.render_bench(out)]
    return summary
