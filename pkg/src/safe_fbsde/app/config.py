"""Run configuration: one JSON document per run, defaults written back out."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..barriers import BarrierParams
from ..dynamics import NoiseModel
from ..learner import LearnerConfig
from ..solver import SolverConfig
from .tasks import TASK_GAMMA, TASK_NAMES, TaskSpec, make_task


class ConfigError(ValueError):
    """Invalid or unreadable configuration; the CLI maps it to exit code 1."""


class NumericalError(RuntimeError):
    """Training or evaluation produced non-finite values; exit code 2."""


@dataclass
class RunConfig:
    task: str = "swap"
    n_agents: int | None = None  # None keeps the task's default team size
    seed: int = 0
    iters: int = 2000
    batch: int = 32
    horizon_steps: int = 30
    dt: float = 0.2
    sigma: float = 0.1
    lr: float = 3e-3
    hidden: int = 64
    head_hidden: int = 32
    out_scale: float = 1.0
    value_scale: float = 100.0
    cost_weight: float = 100.0
    safe: bool = True
    # BarrierParams fields; gamma defaults to the task value
    barrier: dict = field(default_factory=lambda: {"gamma": TASK_GAMMA})
    # any other TaskSpec field (w_p, r, init_noise, ...)
    task_overrides: dict = field(default_factory=dict)
    # SolverConfig fields for the training/eval solves
    solver: dict = field(default_factory=dict)
    # progress line every log_every iterations (0 silences it)
    log_every: int = 50
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    solvecheck_instances: int = 200
    gradcheck_instances: int = 100
    bench_sizes: list = field(default_factory=lambda: [4, 8, 16, 32])

    def __post_init__(self):
        if self.task not in TASK_NAMES:
            raise ConfigError(f"unknown task {self.task!r}; choose from {', '.join(TASK_NAMES)}")
        for name in ("iters", "batch", "horizon_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dt <= 0 or self.sigma < 0 or self.lr <= 0:
            raise ConfigError("dt and lr must be positive and sigma non-negative")

    # --- derived objects -------------------------------------------------------------
    def barrier_params(self) -> BarrierParams:
        try:
            return BarrierParams(**self.barrier)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad barrier section: {exc}") from exc

    def solver_config(self) -> SolverConfig:
        try:
            return SolverConfig(**self.solver)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad solver section: {exc}") from exc

    def learner_config(self) -> LearnerConfig:
        return LearnerConfig(hidden=self.hidden, head_hidden=self.head_hidden, out_scale=self.out_scale,
                             value_scale=self.value_scale, lr=self.lr, batch=self.batch, safe=self.safe,
                             cost_weight=self.cost_weight)

    def build_task(self) -> TaskSpec:
        noise = NoiseModel(self.sigma, self.dt, self.horizon_steps)
        try:
            return make_task(self.task, self.n_agents, noise=noise, barrier=self.barrier_params(),
                             **self.task_overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"cannot build task {self.task!r}: {exc}") from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path=None, **overrides) -> RunConfig:
    """Read a JSON config (missing keys take defaults); ``overrides`` win
    over the file when not None."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: RunConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
