"""Within-task policy optimization: conservative evaluation on an f-interpolation of the
empirical and learnt MDPs, followed by policy improvement regularized toward both the
behavior policy and a meta-policy.

All quantities are exact tabular computations; model rollouts are replaced by the
discounted marginal of the policy in the learnt MDP unless ``rollout_mode="sampled"``.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mdp import (
    LOGIT_RANGE,
    StochasticPolicy,
    TabularMdp,
    discounted_marginal,
    kl_per_state,
    state_values,
)
from .models import ModelParams, fit_ensemble, fit_task_model, to_mdp
from .rng import stream
from .tasks import EmpiricalMdp, OfflineDataset, TaskSpec, induce_empirical

__all__ = [
    "RacConfig",
    "PenaltyReport",
    "RacResult",
    "EvaluationDivergedError",
    "conservative_evaluate",
    "penalty_vector",
    "penalty_report",
    "improve_policy",
    "improvement_objective",
    "behavior_divergence",
    "meta_divergence",
    "tune_beta",
    "tune_lambda",
    "run_rac",
    "sampled_rollout_mdp",
]

log = logging.getLogger(__name__)

D_F_FLOOR = 1e-12
VARIANTS = ("kl_practical", "tv_theory")


class EvaluationDivergedError(FloatingPointError):
    """Conservative evaluation residual kept growing."""


@dataclass(frozen=True)
class RacConfig:
    """Hyperparameters of one RAC run.

    ``lam`` is the regularization weight lambda. ``beta``/``lam`` are initial values when
    the matching ``auto_*`` flag is set. ``model_*`` control the task model fitted from
    the meta-model before policy optimization. ``model_free`` drops the model branch:
    backups use the empirical MDP only and rho is the data marginal, so no penalty
    applies.
    """

    alpha: float = 0.4
    beta: float = 1.0
    lam: float = 5.0
    f: float = 0.5
    gamma: float | None = None
    eval_sweeps: int = 200
    eval_tol: float = 1e-8
    improve_steps: int = 20
    improve_lr: float = 1.0
    rollout_horizon: int = 1
    rollout_mode: str = "exact"
    n_rollouts: int = 2000
    auto_beta: bool = True
    tau: float = 5.0
    beta_lr: float = 1e-3
    beta_log_space: bool = True
    auto_lambda: bool = True
    d_target: float = 0.05
    lambda_lr: float = 1.0
    improvement_variant: str = "kl_practical"
    bc_pseudo_count: float = 1e-2
    q_clip: float = 10.0
    model_steps: int = 25
    model_lr: float = 5.0
    model_eta: float = 1e-3
    ensemble_members: int = 1
    ensemble_select: int = 1
    model_free: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.f < 1.0:
            raise ValueError(f"f must lie strictly inside (0, 1), got {self.f}")
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lam must be non-negative")
        if self.improvement_variant not in VARIANTS:
            raise ValueError(f"improvement_variant must be one of {VARIANTS}")
        if self.rollout_mode not in ("exact", "sampled"):
            raise ValueError("rollout_mode must be 'exact' or 'sampled'")
        if self.gamma is not None and not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.eval_sweeps < 1 or self.improve_steps < 0 or self.rollout_horizon < 1:
            raise ValueError("sweep and step counts must be positive")

    def replace(self, **changes) -> "RacConfig":
        return dataclasses.replace(self, **changes)


def _as_state_weights(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return w.sum(axis=1) if w.ndim == 2 else w


def penalty_vector(rho: np.ndarray, d: np.ndarray, f: float, beta: float = 1.0) -> np.ndarray:
    """beta * (rho - d) / d_f with d_f = f*d + (1-f)*rho floored at 1e-12."""
    d_f = np.maximum(f * d + (1.0 - f) * rho, D_F_FLOOR)
    return beta * (rho - d) / d_f


def conservative_evaluate(
    policy: StochasticPolicy,
    emp: EmpiricalMdp,
    learnt: TabularMdp,
    cfg: RacConfig,
    q0: np.ndarray | None = None,
    rho: np.ndarray | None = None,
    beta: float | None = None,
    sweeps: int | None = None,
) -> np.ndarray:
    """Iterate Q <- f*B_emp Q + (1-f)*B_learnt Q - beta*(rho - d)/d_f.

    ``rho`` defaults to the policy's discounted marginal in ``learnt``; ``d`` is the data
    marginal. Stops after ``sweeps`` (default ``cfg.eval_sweeps``) or once the max-norm
    residual drops below ``cfg.eval_tol``. Q is clamped to +-q_clip*r_max/(1-gamma).
    """
    beta = cfg.beta if beta is None else beta
    sweeps = cfg.eval_sweeps if sweeps is None else sweeps
    if rho is None:
        rho = discounted_marginal(learnt, policy)
    f, g = cfg.f, learnt.gamma
    pen = penalty_vector(rho, emp.marginal, f, beta)
    # both backups share V, so precompute the interpolated reward and dynamics once
    r_mix = f * emp.mdp.reward + (1.0 - f) * learnt.reward - pen
    T_mix = f * emp.mdp.transition + (1.0 - f) * learnt.transition
    bound = cfg.q_clip * max(emp.mdp.r_max, learnt.r_max) / (1.0 - g)
    pi = policy.probs
    q = np.zeros_like(r_mix) if q0 is None else np.array(q0, dtype=float)
    gT = g * T_mix.reshape(-1, T_mix.shape[-1])
    last, growing = np.inf, 0
    for _ in range(sweeps):
        q_new = r_mix + (gT @ np.einsum("sa,sa->s", pi, q)).reshape(r_mix.shape)
        np.minimum(q_new, bound, out=q_new)
        np.maximum(q_new, -bound, out=q_new)
        residual = float(np.abs(q_new - q).max())
        q = q_new
        if residual < cfg.eval_tol:
            break
        growing = growing + 1 if residual > last else 0
        if growing >= 50 or not np.isfinite(residual):
            raise EvaluationDivergedError(
                f"conservative evaluation residual grew for {growing} sweeps (last {residual:.3g})"
            )
        last = residual
    return q


@dataclass(frozen=True)
class PenaltyReport:
    rho: np.ndarray
    d: np.ndarray
    d_f: np.ndarray
    nu: float


def penalty_report(
    policy: StochasticPolicy, data_marginal: np.ndarray, learnt: TabularMdp, f: float
) -> PenaltyReport:
    """rho from the learnt MDP, d_f = f*d + (1-f)*rho and nu = E_rho[(rho - d)/d_f]."""
    if not 0.0 < f < 1.0:
        raise ValueError("f must lie strictly inside (0, 1)")
    rho = discounted_marginal(learnt, policy)
    d = np.asarray(data_marginal, dtype=float)
    d_f = f * d + (1.0 - f) * rho
    nu = float((rho * penalty_vector(rho, d, f)).sum())
    return PenaltyReport(rho, d, d_f, nu)


# -- policy improvement -----------------------------------------------------------


@dataclass(frozen=True)
class _BehaviorRef:
    """BC target: weights d(s, a) for the E_D[log pi] term and the conditional pi_hat."""

    weights: np.ndarray
    conditional: np.ndarray


def _behavior_ref(ref, rho_s: np.ndarray, pseudo_count: float) -> _BehaviorRef:
    if isinstance(ref, OfflineDataset):
        return _BehaviorRef(ref.marginal(), ref.behavior_conditional(pseudo_count))
    if isinstance(ref, StochasticPolicy):
        return _BehaviorRef(rho_s[:, None] * ref.probs, ref.probs)
    raise TypeError("behavior reference must be an OfflineDataset or a StochasticPolicy")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def _kl_terms(z, q, w, bc_w, log_c, lam, alpha, with_grad=True):
    """Per-state kl_practical objective and its logit gradient."""
    logp = _log_softmax(z)
    p = np.exp(logp)
    v = (p * q).sum(axis=1)
    dev = logp - log_c
    kl = (p * dev).sum(axis=1)
    obj = w * v + lam * alpha * (bc_w * logp).sum(axis=1) - lam * (1 - alpha) * w * kl
    if not with_grad:
        return obj, None
    grad = (w[:, None] * p * (q - v[:, None])
            + lam * alpha * (bc_w - bc_w.sum(axis=1, keepdims=True) * p)
            - lam * (1 - alpha) * w[:, None] * p * (dev - kl[:, None]))
    return obj, grad


def improvement_objective(
    policy: StochasticPolicy,
    q: np.ndarray,
    behavior,
    pi_c: StochasticPolicy,
    cfg: RacConfig,
    rho: np.ndarray,
    per_state: bool = False,
):
    """Value of the improvement objective that ``cfg.improvement_variant`` maximizes.

    kl_practical: E_rho[Q] + lam*alpha*E_D[log pi] - lam*(1-alpha)*KL_rho(pi || pi_c).
    tv_theory:    E_rho[Q] - lam*alpha*KL_rho(pi || pi_hat_beta) - lam*(1-alpha)*KL_rho(pi || pi_c).
    """
    w = _as_state_weights(rho)
    ref = _behavior_ref(behavior, w, cfg.bc_pseudo_count)
    lam, alpha = cfg.lam, cfg.alpha
    if cfg.improvement_variant == "kl_practical":
        obj, _ = _kl_terms(policy.logits, q, w, ref.weights, pi_c.log_probs, lam, alpha, False)
    else:
        logp = policy.log_probs
        p = policy.probs
        kl_b = (p * (logp - np.log(ref.conditional))).sum(axis=1)
        kl_c = (p * (logp - pi_c.log_probs)).sum(axis=1)
        obj = w * ((p * q).sum(axis=1) - lam * alpha * kl_b - lam * (1 - alpha) * kl_c)
    return obj if per_state else float(obj.sum())


def _ascend_kl_practical(z, q, w, bc_w, log_c, lam, alpha, steps, lr, trace):
    S = z.shape[0]
    # per-state preconditioning: the objective is separable across states
    scale = np.maximum(w + lam * alpha * bc_w.sum(axis=1), 1e-300)
    step = np.full(S, lr)
    obj, grad = _kl_terms(z, q, w, bc_w, log_c, lam, alpha)
    if trace is not None:
        trace.append(float(obj.sum()))
    for _ in range(steps):
        direction = grad / scale[:, None]
        slope = (grad * direction).sum(axis=1)
        active = slope > 1e-30
        if not active.any():
            break
        accepted = np.zeros(S, dtype=bool)
        trial_step = step.copy()
        for _ in range(60):
            todo = active & ~accepted
            if not todo.any():
                break
            z_try = z + trial_step[:, None] * direction
            obj_try, _ = _kl_terms(z_try, q, w, bc_w, log_c, lam, alpha, False)
            ok = todo & (obj_try >= obj + 1e-4 * trial_step * slope)
            z[ok] = z_try[ok]
            accepted |= ok
            trial_step[todo & ~ok] *= 0.5
        step = np.where(accepted, trial_step * 2.0, trial_step)
        if not np.all(np.isfinite(z)):
            raise FloatingPointError("non-finite logits during policy improvement")
        obj, grad = _kl_terms(z, q, w, bc_w, log_c, lam, alpha)
        if trace is not None:
            trace.append(float(obj.sum()))
    return z


def improve_policy(
    q: np.ndarray,
    behavior,
    pi_c: StochasticPolicy,
    current: StochasticPolicy,
    cfg: RacConfig,
    rho: np.ndarray,
    trace: list | None = None,
) -> StochasticPolicy:
    """One policy-improvement step.

    ``behavior`` is the task dataset (BC toward the data) or an explicit behavior policy;
    ``rho`` is the state(-action) marginal weighting the Q and meta-KL terms. The
    ``kl_practical`` variant runs ``cfg.improve_steps`` backtracking gradient-ascent steps
    on the logits from ``current``; ``tv_theory`` returns the closed-form maximizer
    pi ∝ pi_hat_beta^alpha * pi_c^(1-alpha) * exp(Q/lam). When ``trace`` is given, the
    objective after every step is appended to it.
    """
    w = _as_state_weights(rho)
    ref = _behavior_ref(behavior, w, cfg.bc_pseudo_count)
    lam, alpha = cfg.lam, cfg.alpha
    if cfg.improvement_variant == "tv_theory":
        if lam <= 0:
            z = np.where(q >= q.max(axis=1, keepdims=True), 0.0, -LOGIT_RANGE)
        else:
            z = (alpha * np.log(ref.conditional) + (1 - alpha) * pi_c.log_probs + q / lam)
            z = np.clip(z - z.max(axis=1, keepdims=True), -LOGIT_RANGE, LOGIT_RANGE)
        if not np.all(np.isfinite(z)):
            raise FloatingPointError("non-finite logits in closed-form improvement")
        return StochasticPolicy(z)
    z = _ascend_kl_practical(np.array(current.logits, dtype=float), q, w, ref.weights,
                             pi_c.log_probs, lam, alpha, cfg.improve_steps, cfg.improve_lr, trace)
    return StochasticPolicy(z)


# -- divergences and dual updates --------------------------------------------------


def behavior_divergence(policy: StochasticPolicy, data: OfflineDataset, cfg: RacConfig) -> float:
    """Data-weighted divergence between ``policy`` and the empirical behavior policy.

    kl_practical uses KL(pi_hat_beta || pi) (the reverse-KL proxy); tv_theory uses
    KL(pi || pi_hat_beta).
    """
    d_s = data.marginal().sum(axis=1)
    pb = data.behavior_conditional(cfg.bc_pseudo_count)
    logpb = np.log(pb)
    if cfg.improvement_variant == "kl_practical":
        per = (pb * (logpb - policy.log_probs)).sum(axis=1)
    else:
        per = (policy.probs * (policy.log_probs - logpb)).sum(axis=1)
    return float(max(d_s @ per, 0.0))


def meta_divergence(policy: StochasticPolicy, pi_c: StochasticPolicy, rho: np.ndarray) -> float:
    """rho-weighted KL(pi || pi_c)."""
    return float(max(_as_state_weights(rho) @ kl_per_state(policy, pi_c), 0.0))


def tune_beta(q, rho, d, beta: float, tau: float, lr: float, log_space: bool = False) -> float:
    """Dual ascent on beta against the value gap E_rho[Q] - E_D[Q] - tau, projected to >= 0."""
    gap = float((np.asarray(rho) * q).sum() - (np.asarray(d) * q).sum()) - tau
    if log_space:
        return float(beta * np.exp(np.clip(lr * gap, -50.0, 50.0)))
    return max(0.0, beta + lr * gap)


def tune_lambda(div_beta: float, div_c: float, alpha: float, lam: float, d_target: float, lr: float) -> float:
    """lam <- max(0, lam + lr*(alpha*(div_beta - target) + (1-alpha)*(div_c - target)))."""
    return max(0.0, lam + lr * (alpha * (div_beta - d_target) + (1 - alpha) * (div_c - d_target)))


# -- optional sampled rollouts ---------------------------------------------------


def sampled_rollout_mdp(
    policy: StochasticPolicy,
    learnt: TabularMdp,
    data: OfflineDataset,
    horizon: int,
    n_rollouts: int,
    rng: np.random.Generator,
) -> tuple[TabularMdp, np.ndarray]:
    """Materialize ``n_rollouts`` model rollouts of length ``horizon`` from data states.

    Returns the MDP whose rows on rollout-visited pairs are the rollout frequencies (the
    learnt model elsewhere) and the rollout state-action distribution, used as rho.
    """
    S, A = learnt.n_states, learnt.n_actions
    counts = np.zeros((S, A, S))
    starts = rng.integers(len(data), size=n_rollouts)
    s = data.states[starts]
    cdf_pi = np.cumsum(policy.probs, axis=1)
    for _ in range(horizon):
        a = np.minimum((rng.random(len(s))[:, None] >= cdf_pi[s]).sum(axis=1), A - 1)
        cdf = np.cumsum(learnt.transition[s, a], axis=1)
        s2 = np.minimum((rng.random(len(s))[:, None] >= cdf).sum(axis=1), S - 1)
        np.add.at(counts, (s, a, s2), 1.0)
        s = s2
    n_sa = counts.sum(axis=2)
    seen = n_sa > 0
    T = np.where(seen[..., None], counts / np.where(seen, n_sa, 1.0)[..., None], learnt.transition)
    rho = n_sa / n_sa.sum()
    return TabularMdp(T, learnt.reward, learnt.init_dist, learnt.gamma, learnt.r_max), rho


# -- the RAC loop --------------------------------------------------------------------


@dataclass
class RacResult:
    policy: StochasticPolicy
    q: np.ndarray
    beta: float
    lam: float
    learnt: TabularMdp | None = None
    history: list[dict] = field(default_factory=list)
    rho: np.ndarray | None = None  # marginal used by the last improvement step

    def __iter__(self):
        # allows ``policy, q = run_rac(...)``
        return iter((self.policy, self.q))


def _fit_learnt(data, meta_model, spec, cfg, seed) -> list[TabularMdp]:
    if cfg.ensemble_members > 1:
        ens = fit_ensemble(data, meta_model, cfg.ensemble_members, cfg.ensemble_select,
                           cfg.model_eta, cfg.model_steps, cfg.model_lr, seed=seed)
        return [to_mdp(ens.members[i], spec) for i in ens.selected]
    model = fit_task_model(data, meta_model, cfg.model_eta, cfg.model_steps, cfg.model_lr)
    return [to_mdp(model, spec)]


def run_rac(
    data: OfflineDataset,
    meta_model: ModelParams | None,
    pi_c: StochasticPolicy,
    cfg: RacConfig,
    outer_iters: int,
    spec: TaskSpec,
    init_policy: StochasticPolicy | None = None,
    init_q: np.ndarray | None = None,
    learnt: TabularMdp | list[TabularMdp] | None = None,
    evaluate: Callable[[StochasticPolicy], float] | None = None,
    seed: int = 0,
) -> RacResult:
    """Run ``outer_iters`` iterations of evaluation + improvement on one task.

    The task model is fitted from ``meta_model`` unless ``learnt`` is given. The policy
    starts at ``init_policy`` (default ``pi_c``) and Q at ``init_q`` (default zeros).
    ``evaluate`` is an opaque scorer (e.g. the harness's true return) recorded in the
    history as ``J_true``; training never calls anything else that sees the true task.
    """
    if cfg.gamma is not None and abs(cfg.gamma - spec.gamma) > 1e-12:
        raise ValueError("cfg.gamma disagrees with the task's discount")
    policy = pi_c if init_policy is None else init_policy
    S, A = spec.n_states, spec.n_actions
    q = np.zeros((S, A)) if init_q is None else np.array(init_q, dtype=float)
    beta, lam = cfg.beta, cfg.lam
    if outer_iters <= 0:
        return RacResult(policy, q, beta, lam, None, [])
    emp = induce_empirical(data, spec)
    if cfg.model_free:
        models = [emp.mdp]
    elif learnt is None:
        if meta_model is None:
            raise ValueError("need a meta_model to fit the task model, or an explicit learnt MDP")
        models = _fit_learnt(data, meta_model, spec, cfg, seed)
    else:
        models = learnt if isinstance(learnt, list) else [learnt]
    rng = stream(seed, "rac", data.task_id)
    history = []
    for k in range(outer_iters):
        model = models[int(rng.integers(len(models)))] if len(models) > 1 else models[0]
        if cfg.model_free:
            rho = emp.marginal
        elif cfg.rollout_mode == "sampled":
            model, rho = sampled_rollout_mdp(policy, model, data, cfg.rollout_horizon,
                                             cfg.n_rollouts, rng)
        else:
            rho = discounted_marginal(model, policy)
        if cfg.auto_beta:
            beta = tune_beta(q, rho, emp.marginal, beta, cfg.tau, cfg.beta_lr, cfg.beta_log_space)
        q = conservative_evaluate(policy, emp, model, cfg, q0=q, rho=rho, beta=beta)
        step_cfg = cfg.replace(lam=lam, beta=beta)
        policy = improve_policy(q, data, pi_c, policy, step_cfg, rho)
        div_b = behavior_divergence(policy, data, cfg)
        div_c = meta_divergence(policy, pi_c, rho)
        if cfg.auto_lambda:
            lam = tune_lambda(div_b, div_c, cfg.alpha, lam, cfg.d_target, cfg.lambda_lr)
        nu = float((rho * penalty_vector(rho, emp.marginal, cfg.f)).sum())
        row = {"iter": k + 1, "nu": nu, "div_beta": div_b, "div_c": div_c,
               "beta": beta, "lambda": lam}
        if evaluate is not None:
            row["J_true"] = float(evaluate(policy))
        history.append(row)
    return RacResult(policy, q, beta, lam, models[0], history, rho)
