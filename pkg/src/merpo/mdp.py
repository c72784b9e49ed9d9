"""Exact tabular MDP machinery.

Q tables are ``(n_states, n_actions)`` float arrays and discounted marginals are
``(n_states, n_actions)`` probability tables; both are plain numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LOGIT_RANGE",
    "ConvergenceError",
    "TabularMdp",
    "StochasticPolicy",
    "exact_q",
    "state_values",
    "expected_return",
    "discounted_marginal",
    "state_marginal",
    "f_interpolant",
    "tv_per_state",
    "max_tv_distance",
    "kl_per_state",
    "kl_divergence",
    "d_cql",
    "optimal_q",
]

# Logits are stored shifted so the row maximum is 0 and clipped below at -LOGIT_RANGE,
# which keeps every probability strictly positive (exp(-50) ~ 2e-22).
LOGIT_RANGE = 50.0
PROB_ATOL = 1e-10


class ConvergenceError(RuntimeError):
    """Raised when a fixed-point iteration fails to reach its tolerance."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TabularMdp:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    init_dist: np.ndarray  # (S,)
    gamma: float
    r_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "init_dist", _frozen(self.init_dist))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", float(self.r_max))
        self.validate()

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def validate(self) -> None:
        T, r, mu = self.transition, self.reward, self.init_dist
        if T.ndim != 3 or T.shape[0] != T.shape[2] or T.shape[0] < 1 or T.shape[1] < 1:
            raise ValueError(f"transition must have shape (S, A, S), got {T.shape}")
        S, A = T.shape[:2]
        if r.shape != (S, A):
            raise ValueError(f"reward shape {r.shape} != {(S, A)}")
        if mu.shape != (S,):
            raise ValueError(f"init_dist shape {mu.shape} != {(S,)}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not (np.all(np.isfinite(T)) and np.all(np.isfinite(r)) and np.all(np.isfinite(mu))):
            raise ValueError("MDP tables must be finite")
        if T.min() < 0 or np.abs(T.sum(axis=2) - 1.0).max() > PROB_ATOL:
            raise ValueError("transition rows must be distributions")
        if mu.min() < 0 or abs(mu.sum() - 1.0) > PROB_ATOL:
            raise ValueError("init_dist must be a distribution")
        if np.abs(r).max() > self.r_max * (1 + 1e-12):
            raise ValueError(f"|reward| exceeds r_max={self.r_max}")

    def same_shape(self, other: "TabularMdp") -> bool:
        return self.transition.shape == other.transition.shape and self.gamma == other.gamma

    def with_reward(self, reward: np.ndarray) -> "TabularMdp":
        return TabularMdp(self.transition, reward, self.init_dist, self.gamma, self.r_max)


@dataclass(frozen=True)
class StochasticPolicy:
    """Per-state softmax policy. ``probs`` is derived from ``logits`` and strictly positive."""

    logits: np.ndarray
    probs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        z = np.array(self.logits, dtype=float)
        if z.ndim != 2:
            raise ValueError(f"logits must be (S, A), got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("policy logits contain non-finite values")
        z = np.maximum(z - z.max(axis=1, keepdims=True), -LOGIT_RANGE)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        object.__setattr__(self, "logits", _frozen(z))
        object.__setattr__(self, "probs", _frozen(p))

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "StochasticPolicy":
        return cls(np.zeros((n_states, n_actions)))

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "StochasticPolicy":
        p = np.asarray(probs, dtype=float)
        with np.errstate(divide="ignore"):
            logits = np.log(p)
        # zero-probability actions land on the logit floor
        logits = np.maximum(logits - logits.max(axis=1, keepdims=True), -LOGIT_RANGE)
        return cls(logits)

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape

    @property
    def log_probs(self) -> np.ndarray:
        z = self.logits
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _policy_transition(mdp: TabularMdp, policy: StochasticPolicy) -> np.ndarray:
    """State-to-state matrix P[s, s'] = sum_a pi(a|s) T(s'|s, a)."""
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def state_values(q: np.ndarray, policy: StochasticPolicy) -> np.ndarray:
    return (policy.probs * q).sum(axis=1)


def exact_q(
    mdp: TabularMdp,
    policy: StochasticPolicy,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    q0: np.ndarray | None = None,
) -> np.ndarray:
    """Evaluate ``policy`` by iterating the Bellman expectation operator.

    Stops when the max-norm residual ``|BQ - Q|`` drops below ``tol`` and returns
    the last backup. Raises :class:`ConvergenceError` after ``max_iter`` sweeps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("policy shape does not match MDP")
    T, r, g, pi = mdp.transition, mdp.reward, mdp.gamma, policy.probs
    q = np.zeros_like(r) if q0 is None else np.array(q0, dtype=float)
    for _ in range(max_iter):
        q_new = r + g * (T @ (pi * q).sum(axis=1))
        residual = np.abs(q_new - q).max()
        q = q_new
        if residual < tol:
            return q
        if not np.isfinite(residual):
            break
    raise ConvergenceError(
        f"policy evaluation did not reach tol={tol} within {max_iter} sweeps"
    )


def expected_return(mdp: TabularMdp, policy: StochasticPolicy, tol: float = 1e-10) -> float:
    """J(M, pi) = E_{s0 ~ mu0}[V(s0)]."""
    q = exact_q(mdp, policy, tol=tol)
    return float(mdp.init_dist @ state_values(q, policy))


def state_marginal(mdp: TabularMdp, policy: StochasticPolicy) -> np.ndarray:
    """Normalized discounted state visitation d(s) = (1-g) sum_t g^t P(s_t = s)."""
    P = _policy_transition(mdp, policy)
    g = mdp.gamma
    b = (1.0 - g) * mdp.init_dist
    try:
        d = np.linalg.solve(np.eye(mdp.n_states) - g * P.T, b)
        if not np.all(np.isfinite(d)):
            raise np.linalg.LinAlgError("non-finite solution")
    except np.linalg.LinAlgError:
        d = _state_marginal_power(P, b, g)
    d = np.clip(d, 0.0, None)
    return d / d.sum()


def _state_marginal_power(P: np.ndarray, b: np.ndarray, g: float, tol: float = 1e-14) -> np.ndarray:
    d = b.copy()
    term = b.copy()
    while term.sum() > tol:
        term = g * (term @ P)
        d += term
    return d


def discounted_marginal(mdp: TabularMdp, policy: StochasticPolicy) -> np.ndarray:
    """Discounted state-action marginal d(s, a) = d(s) pi(a|s)."""
    return state_marginal(mdp, policy)[:, None] * policy.probs


def f_interpolant(m1: TabularMdp, m2: TabularMdp, f: float) -> TabularMdp:
    """MDP with dynamics f*T1 + (1-f)*T2 and reward f*r1 + (1-f)*r2."""
    if not m1.same_shape(m2):
        raise ValueError("interpolated MDPs must share shapes and discount")
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"f must lie in [0, 1], got {f}")
    if f == 1.0:
        return m1
    if f == 0.0:
        return m2
    # written as m2 + f*(m1 - m2) so identical inputs interpolate bit-exactly
    T = m2.transition + f * (m1.transition - m2.transition)
    r = m2.reward + f * (m1.reward - m2.reward)
    return TabularMdp(T, r, m1.init_dist, m1.gamma, max(m1.r_max, m2.r_max))


def tv_per_state(p1: StochasticPolicy, p2: StochasticPolicy) -> np.ndarray:
    return 0.5 * np.abs(p1.probs - p2.probs).sum(axis=1)


def max_tv_distance(p1: StochasticPolicy, p2: StochasticPolicy) -> float:
    if p1.shape != p2.shape:
        raise ValueError("policy shapes differ")
    return float(tv_per_state(p1, p2).max())


def kl_per_state(p1: StochasticPolicy, p2: StochasticPolicy) -> np.ndarray:
    """KL(p1(.|s) || p2(.|s)) for every state."""
    if p1.shape != p2.shape:
        raise ValueError("policy shapes differ")
    return (p1.probs * (p1.log_probs - p2.log_probs)).sum(axis=1)


def kl_divergence(p1: StochasticPolicy, p2: StochasticPolicy, weights: np.ndarray) -> float:
    """State-weighted KL. ``weights`` is a state distribution or a state-action marginal."""
    w = np.asarray(weights, dtype=float)
    if w.ndim == 2:
        w = w.sum(axis=1)
    return float(max(w @ kl_per_state(p1, p2), 0.0))


def d_cql(p1: StochasticPolicy, p2: StochasticPolicy, s: int) -> float:
    """sum_a p1(a|s) * (p1(a|s) / p2(a|s) - 1)."""
    a, b = p1.probs[s], p2.probs[s]
    return float(max((a * (a / b - 1.0)).sum(), 0.0))


def optimal_q(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Optimal Q* by value iteration."""
    T, r, g = mdp.transition, mdp.reward, mdp.gamma
    q = np.zeros_like(r)
    for _ in range(max_iter):
        q_new = r + g * (T @ q.max(axis=1))
        if np.abs(q_new - q).max() < tol:
            return q_new
        q = q_new
    raise ConvergenceError(f"value iteration did not reach tol={tol} within {max_iter} sweeps")
