"""Task families, behavior policies of controllable quality, offline datasets and the
empirical MDP they induce."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .mdp import StochasticPolicy, TabularMdp, optimal_q, state_marginal
from .rng import stream

__all__ = [
    "FamilyKind",
    "Quality",
    "TaskFamily",
    "TaskSpec",
    "OfflineDataset",
    "EmpiricalMdp",
    "UNVISITED_COUNT",
    "sample_tasks",
    "make_behavior_policy",
    "collect_dataset",
    "induce_empirical",
    "random_mdp",
]

# |D(s,a)| reported for pairs absent from the data; only needs to be positive and < 1.
UNVISITED_COUNT = 0.5
MIN_TEMPERATURE = 1e-3


class FamilyKind(str, Enum):
    GRIDWORLD_WIND = "gridworld_wind"
    POINT_GRID_GOAL = "point_grid_goal"
    REWARD_FLIP = "reward_flip"


class Quality(str, Enum):
    RANDOM = "random"
    MEDIUM = "medium"
    EXPERT = "expert"


@dataclass(frozen=True)
class TaskFamily:
    """A distribution over tasks sharing state and action spaces.

    ``perturbation_range`` bounds each wind component for ``gridworld_wind`` and is
    ignored by the other kinds. ``slip`` is the probability that the chosen action is
    replaced by a uniformly random one.
    """

    family_kind: FamilyKind = FamilyKind.GRIDWORLD_WIND
    base_size: int = 5
    perturbation_range: tuple[float, float] = (-0.3, 0.3)
    seed: int = 0
    gamma: float = 0.9
    slip: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "family_kind", FamilyKind(self.family_kind))
        lo, hi = self.perturbation_range
        if lo > hi:
            raise ValueError("perturbation_range must be (low, high) with low <= high")
        if self.base_size < 2:
            raise ValueError("base_size must be at least 2")
        if not 0.0 <= self.slip <= 1.0:
            raise ValueError("slip must lie in [0, 1]")


@dataclass(frozen=True)
class TaskSpec:
    """What a learner may know about a task without seeing its MDP: shapes, discount,
    start distribution and the reward bound."""

    n_states: int
    n_actions: int
    gamma: float
    init_dist: np.ndarray
    r_max: float = 1.0

    @classmethod
    def of(cls, mdp: TabularMdp) -> "TaskSpec":
        return cls(mdp.n_states, mdp.n_actions, mdp.gamma, mdp.init_dist, mdp.r_max)


# grid actions: stay, up, down, left, right
_MOVES = np.array([(0, 0), (0, 1), (0, -1), (-1, 0), (1, 0)])


def _grid_transition(k: int, slip: float, wind: tuple[float, float]) -> np.ndarray:
    S, A = k * k, len(_MOVES)
    T = np.zeros((S, A, S))

    def clamp(v):
        return min(max(int(v), 0), k - 1)

    def idx(x, y):
        return clamp(x) * k + clamp(y)

    wx, wy = wind
    px, py = min(abs(wx), 1.0), min(abs(wy), 1.0)
    dx, dy = int(np.sign(wx)), int(np.sign(wy))
    for x in range(k):
        for y in range(k):
            s = x * k + y
            for a in range(A):
                move_probs = np.full(A, slip / A)
                move_probs[a] += 1.0 - slip
                for m, pm in enumerate(move_probs):
                    nx, ny = clamp(x + _MOVES[m][0]), clamp(y + _MOVES[m][1])
                    for bx, qx in ((0, 1 - px), (dx, px)):
                        for by, qy in ((0, 1 - py), (dy, py)):
                            w = pm * qx * qy
                            if w > 0:
                                T[s, a, idx(nx + bx, ny + by)] += w
    return T


def _grid_task(k: int, slip: float, wind, goal: tuple[int, int], gamma: float) -> TabularMdp:
    T = _grid_transition(k, slip, wind)
    S = k * k
    r = np.zeros((S, len(_MOVES)))
    r[goal[0] * k + goal[1], :] = 1.0
    mu = np.zeros(S)
    mu[0] = 1.0
    return TabularMdp(T, r, mu, gamma)


def _velocity_chain(n: int, slip: float, direction: float, gamma: float) -> TabularMdp:
    # states are velocity levels -v_max..v_max; actions decelerate, coast, accelerate
    v_max = (n - 1) / 2.0
    velocities = np.arange(n) - v_max
    T = np.zeros((n, 3, n))
    for s in range(n):
        for a in range(3):
            intended = int(np.clip(s + a - 1, 0, n - 1))
            T[s, a, intended] += 1.0 - slip
            for b in range(3):
                T[s, a, int(np.clip(s + b - 1, 0, n - 1))] += slip / 3
    r = np.repeat((direction * velocities / v_max)[:, None], 3, axis=1)
    mu = np.zeros(n)
    mu[n // 2] = 1.0
    return TabularMdp(T, r, mu, gamma)


def sample_tasks(family: TaskFamily, n: int) -> list[TabularMdp]:
    """Draw ``n`` tasks from ``family``; task ``i`` depends only on (family.seed, i)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    k = family.base_size
    tasks = []
    for i in range(n):
        rng = stream(family.seed, "task", i)
        if family.family_kind is FamilyKind.GRIDWORLD_WIND:
            lo, hi = family.perturbation_range
            wind = tuple(rng.uniform(lo, hi, size=2)) if hi > lo else (lo, lo)
            tasks.append(_grid_task(k, family.slip, wind, (k - 1, k - 1), family.gamma))
        elif family.family_kind is FamilyKind.POINT_GRID_GOAL:
            # goals sit on the far edges of the grid
            edge = [(k - 1, j) for j in range(k)] + [(j, k - 1) for j in range(k - 1)]
            goal = edge[int(rng.integers(len(edge)))]
            tasks.append(_grid_task(k, family.slip, (0.0, 0.0), goal, family.gamma))
        else:
            direction = 1.0 if i % 2 == 0 else -1.0
            tasks.append(_velocity_chain(k, family.slip, direction, family.gamma))
    return tasks


def random_mdp(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    gamma: float = 0.9,
    branching: int | None = None,
) -> TabularMdp:
    """Garnet-style random MDP: each (s, a) reaches ``branching`` random successors."""
    b = n_states if branching is None else branching
    T = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=b, replace=False)
            T[s, a, succ] = rng.dirichlet(np.ones(b))
    r = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    mu = rng.dirichlet(np.ones(n_states))
    return TabularMdp(T, r, mu, gamma)


def make_behavior_policy(
    mdp: TabularMdp, quality: Quality | str, temperature: float = 0.1
) -> StochasticPolicy:
    """Softmax over Q* for ``expert``, a 50/50 mix of that with uniform for ``medium``,
    and the uniform policy for ``random``."""
    quality = Quality(quality)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if quality is Quality.RANDOM:
        return StochasticPolicy.uniform(mdp.n_states, mdp.n_actions)
    temperature = max(temperature, MIN_TEMPERATURE)
    expert = StochasticPolicy(optimal_q(mdp) / temperature)
    if quality is Quality.EXPERT:
        return expert
    return StochasticPolicy.from_probs(0.5 * expert.probs + 0.5 / mdp.n_actions)


@dataclass(frozen=True)
class OfflineDataset:
    """Independent transition tuples with their sufficient statistics.

    Build with :meth:`from_transitions`; the count tables are always recomputed from the
    tuple arrays, never passed in.
    """

    task_id: int
    n_states: int
    n_actions: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    behavior_quality: Quality = Quality.MEDIUM
    seed: int = 0
    count_sa: np.ndarray = field(init=False, repr=False, compare=False)
    count_sas: np.ndarray = field(init=False, repr=False, compare=False)
    reward_sum_sa: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.int64)
        a = np.asarray(self.actions, dtype=np.int64)
        r = np.asarray(self.rewards, dtype=float)
        s2 = np.asarray(self.next_states, dtype=np.int64)
        if not (s.shape == a.shape == r.shape == s2.shape and s.ndim == 1):
            raise ValueError("transition arrays must be 1-D and equally long")
        S, A = self.n_states, self.n_actions
        if len(s) and (s.min() < 0 or s.max() >= S or s2.min() < 0 or s2.max() >= S
                       or a.min() < 0 or a.max() >= A):
            raise ValueError("transition indices out of range")
        count_sas = np.zeros((S, A, S), dtype=np.int64)
        np.add.at(count_sas, (s, a, s2), 1)
        reward_sum = np.zeros((S, A))
        np.add.at(reward_sum, (s, a), r)
        for name, val in (("states", s), ("actions", a), ("rewards", r), ("next_states", s2),
                          ("count_sas", count_sas), ("count_sa", count_sas.sum(axis=2)),
                          ("reward_sum_sa", reward_sum)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "behavior_quality", Quality(self.behavior_quality))

    @classmethod
    def from_transitions(cls, task_id, n_states, n_actions, transitions, quality="medium", seed=0):
        """Build from an iterable of ``(s, a, r, s')`` tuples."""
        rows = list(transitions)
        arr = np.array(rows, dtype=float).reshape(len(rows), 4)
        return cls(task_id, n_states, n_actions, arr[:, 0].astype(np.int64),
                   arr[:, 1].astype(np.int64), arr[:, 2], arr[:, 3].astype(np.int64),
                   quality, seed)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def transitions(self) -> list[tuple[int, int, float, int]]:
        return [(int(s), int(a), float(r), int(s2)) for s, a, r, s2 in
                zip(self.states, self.actions, self.rewards, self.next_states)]

    def marginal(self) -> np.ndarray:
        """Sample-based state-action marginal d(s, a) = |D(s, a)| / |D|."""
        return self.count_sa / max(len(self), 1)

    def behavior_conditional(self, pseudo_count: float = 0.0) -> np.ndarray:
        """Empirical pi_beta(a|s); uniform on states absent from the data."""
        c = self.count_sa + pseudo_count
        n = c.sum(axis=1, keepdims=True)
        uniform = np.full_like(c, 1.0 / self.n_actions, dtype=float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, c / np.where(n > 0, n, 1.0), uniform)

    def split(self, holdout: float, rng: np.random.Generator) -> tuple["OfflineDataset", "OfflineDataset"]:
        """Random train/validation split of the tuples."""
        n = len(self)
        perm = rng.permutation(n)
        n_val = int(round(holdout * n))
        if n >= 2:
            n_val = min(max(n_val, 1), n - 1)
        val, train = perm[:n_val], perm[n_val:]

        def take(ix):
            ix = np.sort(ix)
            return OfflineDataset(self.task_id, self.n_states, self.n_actions, self.states[ix],
                                  self.actions[ix], self.rewards[ix], self.next_states[ix],
                                  self.behavior_quality, self.seed)

        return take(train), take(val)


def collect_dataset(
    mdp: TabularMdp,
    beta: StochasticPolicy,
    n_transitions: int,
    seed: int,
    task_id: int = 0,
    quality: Quality | str = Quality.MEDIUM,
) -> OfflineDataset:
    """Draw i.i.d. tuples with (s, a) ~ d^beta(s) beta(a|s), s' ~ T(.|s, a), r = r(s, a)."""
    if n_transitions < 1:
        raise ValueError("n_transitions must be at least 1")
    rng = stream(seed, "dataset", task_id)
    S, A = mdp.n_states, mdp.n_actions
    d = state_marginal(mdp, beta)[:, None] * beta.probs
    flat = rng.choice(S * A, size=n_transitions, p=d.ravel() / d.sum())
    s, a = np.divmod(flat, A)
    cdf = np.cumsum(mdp.transition[s, a], axis=1)
    u = rng.random(n_transitions)[:, None]
    s2 = np.minimum((u >= cdf).sum(axis=1), S - 1)
    return OfflineDataset(task_id, S, A, s, a, mdp.reward[s, a], s2, quality, seed)


@dataclass(frozen=True)
class EmpiricalMdp:
    """MDP of empirical frequencies plus the mask of pairs seen in the data.

    ``counts`` holds |D(s, a)| with unvisited pairs floored at ``UNVISITED_COUNT``;
    ``marginal`` is the sample-based data distribution d(s, a).
    """

    mdp: TabularMdp
    support: np.ndarray
    counts: np.ndarray
    marginal: np.ndarray


def induce_empirical(data: OfflineDataset, like: TabularMdp | TaskSpec) -> EmpiricalMdp:
    """Empirical MDP of ``data``; unvisited pairs get a uniform row and zero reward.

    ``like`` supplies the discount and initial distribution, which the data does not
    identify.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    S, A = data.n_states, data.n_actions
    if (like.n_states, like.n_actions) != (S, A):
        raise ValueError("dataset shape does not match MDP shape")
    n = data.count_sa.astype(float)
    support = n > 0
    safe_n = np.where(support, n, 1.0)
    T = np.where(support[..., None], data.count_sas / safe_n[..., None], 1.0 / S)
    r = np.where(support, data.reward_sum_sa / safe_n, 0.0)
    r_max = max(like.r_max, float(np.abs(r).max()))
    mdp = TabularMdp(T, r, like.init_dist, like.gamma, r_max)
    counts = np.where(support, n, UNVISITED_COUNT)
    marginal = data.marginal()
    for a in (support, counts, marginal):
        a.setflags(write=False)
    return EmpiricalMdp(mdp, support, counts, marginal)
