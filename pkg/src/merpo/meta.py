"""Meta-training across tasks: per-task RAC inner loops, the meta-policy and meta-Q
updates, adaptive per-task alpha, and adaptation to a new task.

Training sees only :class:`TrainTask` records (dataset plus public task info). True task
MDPs never enter this module; returns are measured through an opaque ``evaluate``
callback supplied by the caller.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mdp import StochasticPolicy, kl_per_state
from .models import ModelParams
from .rac import RacConfig, _fit_learnt, run_rac
from .rng import child_seed, stream
from .tasks import OfflineDataset, TaskSpec

__all__ = [
    "MerpoConfig",
    "MetaState",
    "TrainTask",
    "TaskResult",
    "MerpoRunError",
    "meta_policy_step",
    "meta_policy_objective",
    "meta_q_step",
    "adapt_alpha",
    "train_merpo",
    "adapt_new_task",
]

log = logging.getLogger(__name__)


class MerpoRunError(RuntimeError):
    """A task's inner loop failed; ``task_id`` names the offending task."""

    def __init__(self, task_id: int, cause: Exception):
        super().__init__(f"RAC failed on task {task_id}: {cause}")
        self.task_id = task_id


@dataclass(frozen=True)
class MerpoConfig:
    """Outer-loop hyperparameters. ``rac`` configures every inner loop; its ``alpha`` is
    ignored in favour of ``alpha_init`` and the per-task values."""

    task_batch_size: int = 8
    inner_steps: int = 10
    outer_iters: int = 30
    outer_lr: float = 1.0
    meta_q_lr: float = 0.5
    adaptive_alpha: bool = False
    alpha_init: float = 0.4
    alpha_lr: float = 1e-4
    alpha_bounds: tuple[float, float] = (0.1, 0.5)
    q_meta_init: bool = True
    test_steps: int = 100
    rac: RacConfig = field(default_factory=RacConfig)

    def __post_init__(self):
        lo, hi = self.alpha_bounds
        object.__setattr__(self, "alpha_bounds", (float(lo), float(hi)))
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"alpha_bounds must satisfy 0 <= lo <= hi <= 1, got {self.alpha_bounds}")
        if self.task_batch_size < 1 or self.inner_steps < 0 or self.outer_iters < 0:
            raise ValueError("batch size must be positive and step counts non-negative")
        if not 0.0 <= self.meta_q_lr <= 1.0:
            raise ValueError("meta_q_lr must lie in [0, 1]")
        if self.outer_lr < 0 or self.alpha_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0.0 <= self.alpha_init <= 1.0:
            raise ValueError("alpha_init must lie in [0, 1]")

    def replace(self, **changes) -> "MerpoConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class MetaState:
    pi_c: StochasticPolicy
    q_meta: np.ndarray
    alpha_per_task: np.ndarray
    iter: int = 0
    beta_per_task: np.ndarray | None = None
    lambda_per_task: np.ndarray | None = None

    @classmethod
    def initial(cls, spec: TaskSpec, n_tasks: int, cfg: MerpoConfig) -> "MetaState":
        S, A = spec.n_states, spec.n_actions
        lo, hi = cfg.alpha_bounds
        alpha0 = float(np.clip(cfg.alpha_init, lo, hi))
        return cls(
            StochasticPolicy.uniform(S, A),
            np.zeros((S, A)),
            np.full(n_tasks, alpha0),
            0,
            np.full(n_tasks, cfg.rac.beta),
            np.full(n_tasks, cfg.rac.lam),
        )


@dataclass(frozen=True)
class TrainTask:
    """Everything training may know about a task."""

    data: OfflineDataset
    spec: TaskSpec


@dataclass(frozen=True)
class TaskResult:
    """Last inner-loop iterate of one task, as consumed by the meta updates."""

    policy: StochasticPolicy
    q: np.ndarray
    rho: np.ndarray
    lam: float
    alpha: float


def meta_policy_objective(logits: np.ndarray, results: Sequence[TaskResult]) -> float:
    """Batch mean of lam_n*(1-alpha_n)*KL_rho_n(pi_n || pi_c) as a function of pi_c's logits."""
    pi_c = StochasticPolicy(logits)
    vals = [r.lam * (1 - r.alpha) * float(r.rho.sum(axis=-1) @ kl_per_state(r.policy, pi_c))
            for r in results]
    return float(np.mean(vals))


def _meta_policy_grad(logits: np.ndarray, results: Sequence[TaskResult]):
    q = StochasticPolicy(logits).probs
    grad = np.zeros_like(q)
    weight = np.zeros(q.shape[0])
    for r in results:
        w = r.lam * (1 - r.alpha) * r.rho.sum(axis=-1)
        grad += w[:, None] * (q - r.policy.probs)
        weight += w
    n = len(results)
    return grad / n, weight / n


def meta_policy_step(state: MetaState, results: Sequence[TaskResult], cfg: MerpoConfig) -> StochasticPolicy:
    """One descent step on the meta-policy's logits.

    The objective is the batch mean of lam_n*(1-alpha_n)*KL_rho_n(pi_n || pi_c); the Q and
    behavior terms of the meta objective do not depend on pi_c. The gradient is scaled
    per state by its total weight (a diagonal preconditioner, since the objective is
    separable across states) and the step is halved until the objective decreases.
    """
    if not results:
        raise ValueError("need at least one task result")
    z = np.array(state.pi_c.logits)
    grad, weight = _meta_policy_grad(z, results)
    if not np.any(grad):
        return state.pi_c
    direction = grad / np.maximum(weight, 1e-12)[:, None]
    obj = meta_policy_objective(z, results)
    slope = float((grad * direction).sum())
    step = cfg.outer_lr
    for _ in range(60):
        z_new = z - step * direction
        if meta_policy_objective(z_new, results) <= obj - 1e-4 * step * slope:
            return StochasticPolicy(z_new)
        step *= 0.5
    return state.pi_c


def meta_q_step(q_meta: np.ndarray, task_qs: Sequence[np.ndarray], xi_q: float) -> np.ndarray:
    """Q_meta - xi_q * (Q_meta - mean(task_qs))."""
    if not task_qs:
        raise ValueError("need at least one task Q")
    if xi_q == 0:
        return np.array(q_meta, dtype=float)
    mean_q = np.mean(np.stack(task_qs), axis=0)
    if xi_q == 1:
        return mean_q
    return q_meta - xi_q * (q_meta - mean_q)


def adapt_alpha(alpha: float, div_beta: float, div_c: float, lr: float, bounds: tuple[float, float]) -> float:
    """clip(alpha + lr * (div_beta - div_c), bounds).

    The per-task loss (1 - alpha) * (div_beta - div_c) is linear in alpha with slope
    -(div_beta - div_c), so one descent step moves alpha by lr * (div_beta - div_c).
    """
    lo, hi = bounds
    return float(np.clip(alpha + lr * (div_beta - div_c), lo, hi))


def _batches(n_tasks: int, size: int, seed: int):
    """Yield task batches without replacement, reshuffling at every epoch."""
    size = min(size, n_tasks)
    epoch = 0
    while True:
        order = stream(seed, "batches", epoch).permutation(n_tasks)
        for i in range(0, n_tasks - size + 1, size):
            yield [int(t) for t in order[i:i + size]]
        epoch += 1


def train_merpo(
    tasks: Sequence[TrainTask],
    meta_model: ModelParams,
    cfg: MerpoConfig,
    seed: int = 0,
    state: MetaState | None = None,
    on_iter: Callable[[MetaState, dict], None] | None = None,
) -> MetaState:
    """Meta-train the meta-policy and meta-Q over ``tasks``.

    Each task model is adapted from ``meta_model`` once, up front. Every outer iteration
    draws a task batch, runs ``inner_steps`` RAC iterations per task from (pi_c, Q_meta),
    optionally adapts each task's alpha, then updates pi_c and Q_meta. ``on_iter`` is
    called with the new state and a summary row (iter, mean_alpha, mean_beta,
    mean_lambda) after every outer iteration.
    """
    if not tasks:
        raise ValueError("need at least one training task")
    spec = tasks[0].spec
    if state is None:
        state = MetaState.initial(spec, len(tasks), cfg)
    if len(state.alpha_per_task) != len(tasks):
        raise ValueError("state was initialized for a different number of tasks")
    learnt = {}
    for n, task in enumerate(tasks):
        try:
            learnt[n] = _fit_learnt(task.data, meta_model, task.spec, cfg.rac, child_seed(seed, "model", n))
        except (ValueError, FloatingPointError) as exc:
            raise MerpoRunError(task.data.task_id, exc) from exc
    batches = _batches(len(tasks), cfg.task_batch_size, seed)
    alphas = np.array(state.alpha_per_task, dtype=float)
    betas = np.array(state.beta_per_task, dtype=float)
    lams = np.array(state.lambda_per_task, dtype=float)
    lo, hi = cfg.alpha_bounds
    for k in range(state.iter, state.iter + cfg.outer_iters):
        batch = next(batches)
        results, qs = [], []
        for n in batch:
            task = tasks[n]
            rcfg = cfg.rac.replace(alpha=float(alphas[n]), beta=float(betas[n]), lam=float(lams[n]))
            try:
                res = run_rac(task.data, None, state.pi_c, rcfg, cfg.inner_steps, task.spec,
                              init_q=state.q_meta if cfg.q_meta_init else None,
                              learnt=learnt[n], seed=child_seed(seed, "inner", k, n))
            except (ValueError, FloatingPointError) as exc:
                raise MerpoRunError(task.data.task_id, exc) from exc
            if not res.history:
                continue
            last = res.history[-1]
            betas[n], lams[n] = res.beta, res.lam
            results.append(TaskResult(res.policy, res.q, res.rho, res.lam, float(alphas[n])))
            qs.append(res.q)
            if cfg.adaptive_alpha:
                alphas[n] = adapt_alpha(alphas[n], last["div_beta"], last["div_c"], cfg.alpha_lr, (lo, hi))
            else:
                alphas[n] = float(np.clip(alphas[n], lo, hi))
        pi_c, q_meta = state.pi_c, state.q_meta
        if results:
            pi_c = meta_policy_step(state, results, cfg)
            q_meta = meta_q_step(state.q_meta, qs, cfg.meta_q_lr)
        state = MetaState(pi_c, q_meta, alphas.copy(), k + 1, betas.copy(), lams.copy())
        if on_iter is not None:
            on_iter(state, {"iter": k + 1, "mean_alpha": float(alphas[batch].mean()),
                            "mean_beta": float(betas[batch].mean()),
                            "mean_lambda": float(lams[batch].mean())})
    return state


def adapt_new_task(
    state: MetaState,
    meta_model: ModelParams,
    data: OfflineDataset,
    cfg: MerpoConfig,
    spec: TaskSpec,
    steps: int | None = None,
    seed: int = 0,
    evaluate: Callable[[StochasticPolicy], float] | None = None,
):
    """Adapt the model from ``meta_model`` and run RAC from (pi_c, Q_meta) on a new task.

    Returns the full :class:`RacResult`; ``steps`` defaults to ``cfg.test_steps`` and
    ``steps=0`` returns the meta-policy unchanged.
    """
    steps = cfg.test_steps if steps is None else steps
    rcfg = cfg.rac.replace(alpha=float(np.clip(cfg.alpha_init, *cfg.alpha_bounds)))
    return run_rac(data, meta_model, state.pi_c, rcfg, steps, spec,
                   init_q=state.q_meta if cfg.q_meta_init else None,
                   evaluate=evaluate, seed=seed)
