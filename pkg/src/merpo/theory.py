"""Numeric checks of the safe-improvement condition and of the interpolant return bound on
concrete tabular instances, using exact dynamic programming for ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mdp import (
    StochasticPolicy,
    TabularMdp,
    discounted_marginal,
    exact_q,
    expected_return,
    f_interpolant,
    max_tv_distance,
    state_values,
)
from .rac import RacConfig, penalty_report
from .rng import stream
from .tasks import collect_dataset, induce_empirical, random_mdp

__all__ = [
    "TheoremReport",
    "LemmaOneReport",
    "ConcentrationConstants",
    "check_theorem1",
    "check_lemma1",
    "lemma1_eta",
    "alpha_sweep",
    "SweepCase",
    "LEMMA1_KINDS",
    "lemma1_instance",
]

DEFINED_TOL = 1e-12
# residual tolerance for reported returns; the value error is at most gamma*tol/(1-gamma)
RETURN_TOL = 1e-13


@dataclass(frozen=True)
class TheoremReport:
    nu_pi: float
    nu_beta: float
    nu_pi_c: float
    epsilon: float | None
    alpha_window: tuple[float, float] | None
    alpha_used: float
    condition_met: bool
    J_policy: float
    J_beta: float
    J_meta: float
    improved_over_beta: bool
    improved_over_meta: bool
    divergence: float
    reason: str = ""


@dataclass(frozen=True)
class ConcentrationConstants:
    """User-set concentration constants for the sampling-error bounds. The checks here use
    exact model errors and never read them; they are carried for reporting."""

    c_t: float = 1.0
    c_r: float = 1.0
    c_rt: float = 1.0
    delta: float = 0.05


@dataclass(frozen=True)
class LemmaOneReport:
    j_interp: float
    j_true: float
    eta_bound: float
    holds: bool
    terms: tuple[float, float, float, float] = field(default=(0.0, 0.0, 0.0, 0.0))


def check_theorem1(
    mdp: TabularMdp,
    policy: StochasticPolicy,
    pi_beta: StochasticPolicy,
    pi_c: StochasticPolicy,
    learnt: TabularMdp,
    data_marginal: np.ndarray,
    cfg: RacConfig,
) -> TheoremReport:
    """Evaluate the safe-improvement condition for ``policy``.

    epsilon = beta*(nu_pi - nu_beta) / (2*lam*(1-gamma)*D) with D the max-state TV
    distance between ``policy`` and ``pi_beta``. The alpha window is
    (max(1/2 - epsilon, 0), 1/2) for epsilon >= 0. Returns are exact in ``mdp``.
    """
    f, g = cfg.f, mdp.gamma
    nu_pi = penalty_report(policy, data_marginal, learnt, f).nu
    nu_beta = penalty_report(pi_beta, data_marginal, learnt, f).nu
    nu_c = penalty_report(pi_c, data_marginal, learnt, f).nu
    D = max_tv_distance(policy, pi_beta)
    J_pi, J_b, J_c = (expected_return(mdp, p, RETURN_TOL) for p in (policy, pi_beta, pi_c))
    common = dict(nu_pi=nu_pi, nu_beta=nu_beta, nu_pi_c=nu_c, alpha_used=cfg.alpha,
                  J_policy=J_pi, J_beta=J_b, J_meta=J_c,
                  improved_over_beta=J_pi >= J_b, improved_over_meta=J_pi >= J_c, divergence=D)
    if D < DEFINED_TOL:
        return TheoremReport(epsilon=None, alpha_window=None, condition_met=False,
                             reason="D(pi, pi_beta) is zero; epsilon undefined", **common)
    if cfg.lam <= 0:
        return TheoremReport(epsilon=None, alpha_window=None, condition_met=False,
                             reason="lambda is zero; epsilon undefined", **common)
    eps = cfg.beta * (nu_pi - nu_beta) / (2.0 * cfg.lam * (1.0 - g) * D)
    if eps < 0:
        return TheoremReport(epsilon=eps, alpha_window=None, condition_met=False,
                             reason="nu_pi <= nu_beta; window empty", **common)
    window = (max(0.5 - eps, 0.0), 0.5)
    met = nu_pi - nu_beta > 0 and window[0] < cfg.alpha < window[1]
    reason = "" if met else "alpha outside window"
    return TheoremReport(epsilon=eps, alpha_window=window, condition_met=met, reason=reason, **common)


def lemma1_eta(m: TabularMdp, m1: TabularMdp, m2: TabularMdp, f: float, policy: StochasticPolicy):
    """The four terms of the interpolant return bound, with exact model errors.

    D_tv(T_M2, T_M) is read as the maximum TV over state-action rows (the most
    conservative reading). Expectations use the discounted marginal of ``policy`` in
    ``m`` and Q is the exact Q of ``policy`` in ``m``.
    """
    g = m.gamma
    d = discounted_marginal(m, policy)
    v = state_values(exact_q(m, policy), policy)
    r_max = max(m.r_max, m1.r_max, m2.r_max)
    tv = 0.5 * np.abs(m2.transition - m.transition).sum(axis=2).max()
    t1 = 2 * g * (1 - f) / (1 - g) ** 2 * r_max * tv
    t2 = g * f / (1 - g) * abs(float((d * ((m.transition - m1.transition) @ v)).sum()))
    t3 = f / (1 - g) * float((d * np.abs(m1.reward - m.reward)).sum())
    t4 = (1 - f) / (1 - g) * float((d * np.abs(m2.reward - m.reward)).sum())
    return t1, t2, t3, t4


def check_lemma1(
    m: TabularMdp,
    m1: TabularMdp,
    m2: TabularMdp,
    f: float,
    policy: StochasticPolicy,
    constants: ConcentrationConstants | None = None,
) -> LemmaOneReport:
    """|J(M_f, pi) - J(M, pi)| <= eta, with M_f = f*M1 + (1-f)*M2."""
    j_interp = expected_return(f_interpolant(m1, m2, f), policy, RETURN_TOL)
    j_true = expected_return(m, policy, RETURN_TOL)
    terms = lemma1_eta(m, m1, m2, f, policy)
    eta = float(sum(terms))
    return LemmaOneReport(j_interp, j_true, eta, abs(j_interp - j_true) <= eta + 1e-9, terms)


@dataclass(frozen=True)
class SweepCase:
    """One seeded RAC problem: ``run`` maps a config to a policy, ``score`` gives its
    exact return in the hidden task."""

    seed: int
    run: Callable[[RacConfig], StochasticPolicy]
    score: Callable[[StochasticPolicy], float]


def alpha_sweep(cases: Sequence[SweepCase], alphas: Sequence[float], cfg: RacConfig) -> list[dict]:
    """Exact return of the RAC policy for every (alpha, case) pair.

    Returns rows ``{"alpha", "seed", "J"}`` in alpha-major order.
    """
    rows = []
    for a in alphas:
        run_cfg = cfg.replace(alpha=float(a))
        for case in cases:
            rows.append({"alpha": float(a), "seed": case.seed, "J": float(case.score(case.run(run_cfg)))})
    return rows


LEMMA1_KINDS = ("perturb", "empirical", "indep")


def lemma1_instance(seed: int, index: int, kind: str | None = None):
    """A random ``(m, m1, m2, f, policy)`` instance for the interpolant bound.

    ``kind`` defaults to cycling through :data:`LEMMA1_KINDS` by ``index``:
    ``perturb`` draws m1 and m2 as random perturbations of m, ``empirical`` uses the
    empirical MDP of a small dataset from m as m1, ``indep`` draws m1 and m2
    independently of m. Every tenth instance uses f = 1 - 1e-9.
    """
    kind = LEMMA1_KINDS[index % len(LEMMA1_KINDS)] if kind is None else kind
    if kind not in LEMMA1_KINDS:
        raise ValueError(f"kind must be one of {LEMMA1_KINDS}")
    rng = stream(seed, "lemma1", kind, index)
    S, A = int(rng.integers(2, 8)), int(rng.integers(1, 4))
    g = float(rng.uniform(0.5, 0.95))
    m = random_mdp(rng, S, A, g, branching=int(rng.integers(1, S + 1)))

    def perturbed(scale: float) -> TabularMdp:
        o = random_mdp(rng, S, A, g)
        w = rng.uniform(0, scale)
        return TabularMdp(m.transition + w * (o.transition - m.transition),
                          m.reward + w * (o.reward - m.reward), m.init_dist, g)

    if kind == "perturb":
        m1, m2 = perturbed(0.3), perturbed(0.3)
    elif kind == "indep":
        # the bound compares returns from one start distribution, so m1 and m2 share m's
        m1, m2 = (TabularMdp(o.transition, o.reward, m.init_dist, g)
                  for o in (random_mdp(rng, S, A, g), random_mdp(rng, S, A, g)))
    else:
        pb = StochasticPolicy(rng.normal(size=(S, A)))
        data = collect_dataset(m, pb, int(rng.integers(5, 200)), seed=index)
        m1, m2 = induce_empirical(data, m).mdp, perturbed(0.3)
    f = float(rng.uniform(0.01, 0.99)) if index % 10 else 1.0 - 1e-9
    policy = StochasticPolicy(rng.normal(size=(S, A)) * 2)
    return m, m1, m2, f, policy
