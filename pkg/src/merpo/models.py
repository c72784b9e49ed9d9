"""Tabular dynamics/reward models and proximal meta-model learning.

A model is a table of next-state logits plus a per-pair reward estimate. Its loss on a
dataset is the mean negative log-likelihood of the observed next states plus the
mean unit-variance Gaussian reward error ``0.5 * (r - r_hat)^2``. All gradients are
computed from the dataset's count tables, so one full-batch step costs O(S*A*S).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import TabularMdp
from .rng import stream
from .tasks import OfflineDataset

__all__ = [
    "ModelParams",
    "MetaModelParams",
    "ModelEnsemble",
    "ModelDivergedError",
    "nll",
    "transition_nll",
    "proximal_objective",
    "proximal_gradient",
    "fit_task_model",
    "train_meta_model",
    "fit_ensemble",
    "to_mdp",
]


class ModelDivergedError(FloatingPointError):
    """Raised when model fitting produces non-finite parameters."""


@dataclass(frozen=True)
class ModelParams:
    trans_logits: np.ndarray  # (S, A, S)
    reward_est: np.ndarray  # (S, A)

    def __post_init__(self):
        z = np.array(self.trans_logits, dtype=float)
        r = np.array(self.reward_est, dtype=float)
        if z.ndim != 3 or r.shape != z.shape[:2]:
            raise ValueError("model shapes must be (S, A, S) and (S, A)")
        z.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "trans_logits", z)
        object.__setattr__(self, "reward_est", r)

    @classmethod
    def zeros(cls, n_states: int, n_actions: int):
        return cls(np.zeros((n_states, n_actions, n_states)), np.zeros((n_states, n_actions)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.reward_est.shape

    @property
    def transition(self) -> np.ndarray:
        z = self.trans_logits - self.trans_logits.max(axis=2, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=2, keepdims=True)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.trans_logits.ravel(), self.reward_est.ravel()])

    def unflat(self, v: np.ndarray):
        S, A = self.shape
        k = S * A * S
        return type(self)(v[:k].reshape(S, A, S), v[k:].reshape(S, A))


class MetaModelParams(ModelParams):
    """Meta-model parameters; same layout as :class:`ModelParams`."""


def to_mdp(model: ModelParams, like: TabularMdp, clip_reward: bool = True) -> TabularMdp:
    """The learnt MDP: model dynamics and rewards with ``like``'s mu0 and discount."""
    r = model.reward_est
    if clip_reward:
        r = np.clip(r, -like.r_max, like.r_max)
    r_max = max(like.r_max, float(np.abs(r).max()))
    return TabularMdp(model.transition, r, like.init_dist, like.gamma, r_max)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=2, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=2, keepdims=True))


def transition_nll(model: ModelParams, data: OfflineDataset) -> float:
    """Mean -log T_hat(s'|s, a) over the tuples."""
    if len(data) == 0:
        raise ValueError("dataset is empty")
    return float(-(data.count_sas * _log_softmax(model.trans_logits)).sum() / len(data))


def _reward_loss(model: ModelParams, data: OfflineDataset) -> float:
    err = data.rewards - model.reward_est[data.states, data.actions]
    return float(0.5 * np.mean(err ** 2))


def nll(model: ModelParams, data: OfflineDataset) -> float:
    """Transition NLL plus the Gaussian reward error."""
    return transition_nll(model, data) + _reward_loss(model, data)


def proximal_objective(model: ModelParams, data: OfflineDataset, anchor: ModelParams, eta: float) -> float:
    """nll(model) + eta * ||theta - anchor||^2 over all parameters."""
    obj = nll(model, data)
    if eta:
        obj += eta * float(np.sum((model.flat() - anchor.flat()) ** 2))
    return obj


def proximal_gradient(model: ModelParams, data: OfflineDataset, anchor: ModelParams, eta: float):
    """Gradient of :func:`proximal_objective` as ``(d_logits, d_reward)``."""
    N = len(data)
    n_sa = data.count_sa.astype(float)
    p = model.transition
    g_z = (n_sa[..., None] * p - data.count_sas) / N
    g_r = (n_sa * model.reward_est - data.reward_sum_sa) / N
    if eta:
        g_z = g_z + 2 * eta * (model.trans_logits - anchor.trans_logits)
        g_r = g_r + 2 * eta * (model.reward_est - anchor.reward_est)
    return g_z, g_r


def fit_task_model(
    data: OfflineDataset,
    init: ModelParams,
    eta: float = 1e-3,
    steps: int = 25,
    lr: float = 1.0,
    anchor: ModelParams | None = None,
) -> ModelParams:
    """Full-batch gradient descent on ``nll + eta * ||theta - anchor||^2`` from ``init``.

    ``anchor`` defaults to ``init`` (adaptation from a meta-model).
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    anchor = init if anchor is None else anchor
    z, r = np.array(init.trans_logits), np.array(init.reward_est)
    for step in range(steps):
        g_z, g_r = proximal_gradient(ModelParams(z, r), data, anchor, eta)
        with np.errstate(over="ignore", invalid="ignore"):
            z = z - lr * g_z
            r = r - lr * g_r
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(r))):
            raise ModelDivergedError(
                f"model fit diverged at step {step} (lr={lr}, eta={eta}); lower the learning rate"
            )
    return ModelParams(z, r) if steps else init


def train_meta_model(
    datasets: list[OfflineDataset],
    eta: float = 1e-3,
    inner_steps: int = 25,
    outer_lr: float = 5e-2,
    outer_iters: int = 100,
    inner_lr: float = 1.0,
    init: MetaModelParams | None = None,
) -> MetaModelParams:
    """First-order proximal meta-learning of the dynamics model.

    Each outer iteration adapts one model per task from the current meta-model and moves
    the meta-model toward their mean: ``phi <- phi - outer_lr * (phi - mean(theta_n))``.
    Tasks are reduced in index order.
    """
    if not datasets:
        raise ValueError("need at least one dataset")
    S, A = datasets[0].n_states, datasets[0].n_actions
    phi = MetaModelParams.zeros(S, A) if init is None else init
    for _ in range(outer_iters):
        thetas = [fit_task_model(d, phi, eta, inner_steps, inner_lr) for d in datasets]
        mean_z = np.mean([t.trans_logits for t in thetas], axis=0)
        mean_r = np.mean([t.reward_est for t in thetas], axis=0)
        phi = MetaModelParams(
            phi.trans_logits - outer_lr * (phi.trans_logits - mean_z),
            phi.reward_est - outer_lr * (phi.reward_est - mean_r),
        )
    return phi


@dataclass(frozen=True)
class ModelEnsemble:
    members: list[ModelParams]
    selected: list[int]
    validation_nll: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.selected) > len(self.members) or not self.selected:
            raise ValueError("selection must be a non-empty subset of members")

    def sample(self, rng: np.random.Generator) -> ModelParams:
        return self.members[self.selected[int(rng.integers(len(self.selected)))]]

    def best(self) -> ModelParams:
        return self.members[self.selected[0]]


def fit_ensemble(
    data: OfflineDataset,
    init: ModelParams,
    members: int = 3,
    select: int = 2,
    eta: float = 1e-3,
    steps: int = 25,
    lr: float = 1.0,
    jitter: float = 0.1,
    holdout: float = 0.1,
    seed: int = 0,
) -> ModelEnsemble:
    """Train ``members`` models from jittered copies of ``init`` on a 90/10 split and keep
    the ``select`` best by validation NLL (ascending)."""
    if not 1 <= select <= members:
        raise ValueError("need 1 <= select <= members")
    rng = stream(seed, "ensemble", data.task_id)
    train, val = data.split(holdout, rng) if len(data) >= 2 else (data, data)
    models, scores = [], []
    for _ in range(members):
        start = ModelParams(init.trans_logits + jitter * rng.standard_normal(init.trans_logits.shape),
                           init.reward_est)
        m = fit_task_model(train, start, eta, steps, lr, anchor=init)
        models.append(m)
        scores.append(nll(m, val))
    order = sorted(range(members), key=lambda i: (scores[i], i))
    return ModelEnsemble(models, order[:select], scores)
