import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from merpo.mdp import (
    ConvergenceError,
    StochasticPolicy,
    TabularMdp,
    d_cql,
    discounted_marginal,
    exact_q,
    expected_return,
    f_interpolant,
    kl_divergence,
    kl_per_state,
    max_tv_distance,
    optimal_q,
    state_marginal,
    state_values,
    tv_per_state,
)
from merpo.rng import stream
from conftest import rand_mdp, rand_policy, single_state


# -- construction -----------------------------------------------------------------------

def test_mdp_rejects_bad_rows():
    T = np.ones((2, 1, 2)) * 0.6
    with pytest.raises(ValueError, match="distributions"):
        TabularMdp(T, np.zeros((2, 1)), np.array([1.0, 0.0]), 0.9)


def test_mdp_rejects_bad_gamma_and_reward():
    T = np.ones((1, 1, 1))
    with pytest.raises(ValueError):
        TabularMdp(T, np.zeros((1, 1)), np.ones(1), 1.0)
    with pytest.raises(ValueError, match="r_max"):
        TabularMdp(T, np.full((1, 1), 2.0), np.ones(1), 0.9)


def test_mdp_tables_are_read_only():
    m = rand_mdp(0)
    with pytest.raises(ValueError):
        m.reward[0, 0] = 3.0


def test_policy_probs_positive_and_normalized():
    p = StochasticPolicy(np.array([[0.0, 1000.0], [3.0, 3.0]]))
    assert np.all(p.probs > 0)
    np.testing.assert_allclose(p.probs.sum(axis=1), 1.0, atol=1e-12)


def test_policy_rejects_nonfinite():
    with pytest.raises(ValueError):
        StochasticPolicy(np.array([[0.0, np.nan]]))


def test_from_probs_round_trip():
    probs = np.array([[0.2, 0.3, 0.5], [0.9, 0.05, 0.05]])
    np.testing.assert_allclose(StochasticPolicy.from_probs(probs).probs, probs, atol=1e-12)


# -- evaluation -------------------------------------------------------------------------

def test_single_state_q_is_geometric_series():
    np.testing.assert_allclose(exact_q(single_state(1.0, 0.5), StochasticPolicy.uniform(1, 1)), 2.0)


def test_zero_reward_gives_zero_q():
    m = rand_mdp(1).with_reward(np.zeros((5, 2)))
    assert np.array_equal(exact_q(m, rand_policy(0, 5, 2)), np.zeros((5, 2)))
    assert expected_return(m, rand_policy(0, 5, 2)) == 0.0


def test_single_state_return_gamma_09():
    assert expected_return(single_state(1.0, 0.9), StochasticPolicy.uniform(1, 1)) == pytest.approx(10.0, abs=1e-8)


def test_exact_q_fixed_point_residual():
    m, pi = rand_mdp(2, 6, 3), rand_policy(1, 6, 3)
    q = exact_q(m, pi, tol=1e-10)
    backup = m.reward + m.gamma * m.transition @ state_values(q, pi)
    assert np.abs(backup - q).max() < 1e-9


def test_exact_q_matches_linear_solve():
    m, pi = rand_mdp(3, 6, 3), rand_policy(2, 6, 3)
    P = np.einsum("sa,sat->st", pi.probs, m.transition)
    v = np.linalg.solve(np.eye(6) - m.gamma * P, (pi.probs * m.reward).sum(axis=1))
    q = m.reward + m.gamma * m.transition @ v
    np.testing.assert_allclose(exact_q(m, pi, tol=1e-13), q, atol=1e-10)


def test_exact_q_nonconvergence_raises():
    with pytest.raises(ConvergenceError):
        exact_q(rand_mdp(0), rand_policy(0, 5, 2), tol=1e-12, max_iter=3)


def test_exact_q_matches_monte_carlo():
    m, pi = rand_mdp(4, 5, 2), StochasticPolicy.uniform(5, 2)
    rng = stream(0, "mc")
    n, horizon = 100_000, 200
    s = rng.choice(5, size=n, p=m.init_dist)
    ret = np.zeros(n)
    disc = 1.0
    cdf_T = np.cumsum(m.transition, axis=2)
    for _ in range(horizon):
        a = (rng.random(n) >= 0.5).astype(int)
        ret += disc * m.reward[s, a]
        s = np.minimum((rng.random(n)[:, None] >= cdf_T[s, a]).sum(axis=1), 4)
        disc *= m.gamma
    se = ret.std() / np.sqrt(n)
    assert abs(ret.mean() - expected_return(m, pi)) < 3 * se


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 7), st.integers(1, 4), st.floats(0.1, 0.97))
def test_return_two_ways_agree(seed, S, A, g):
    m, pi = rand_mdp(seed, S, A, g), rand_policy(seed + 1, S, A, 2.0)
    via_marginal = float((discounted_marginal(m, pi) * m.reward).sum()) / (1 - g)
    assert expected_return(m, pi) == pytest.approx(via_marginal, abs=1e-6)


def test_return_equals_init_weighted_state_values():
    m, pi = rand_mdp(5, 6, 2), rand_policy(3, 6, 2)
    q = exact_q(m, pi)
    assert expected_return(m, pi) == pytest.approx(float(m.init_dist @ (pi.probs * q).sum(axis=1)), abs=1e-12)


# -- marginals --------------------------------------------------------------------------

def test_marginal_single_state():
    np.testing.assert_allclose(discounted_marginal(single_state(), StochasticPolicy.uniform(1, 1)), [[1.0]])


def test_marginal_absorbing_start():
    T = np.zeros((2, 1, 2))
    T[0, 0, 0] = T[1, 0, 1] = 1.0
    m = TabularMdp(T, np.zeros((2, 1)), np.array([1.0, 0.0]), 0.9)
    np.testing.assert_allclose(state_marginal(m, StochasticPolicy.uniform(2, 1)), [1.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 7), st.integers(1, 3), st.floats(0.1, 0.95))
def test_marginal_matches_power_series(seed, S, A, g):
    m, pi = rand_mdp(seed, S, A, g), rand_policy(seed, S, A)
    P = np.einsum("sa,sat->st", pi.probs, m.transition)
    d, term = np.zeros(S), m.init_dist.copy()
    for _ in range(2000):
        d += term
        term = g * term @ P
    d *= 1 - g
    d_sa = d[:, None] * pi.probs
    out = discounted_marginal(m, pi)
    assert 0.5 * np.abs(out - d_sa).sum() < 1e-6
    assert out.min() >= 0 and abs(out.sum() - 1) < 1e-8


# -- interpolant ------------------------------------------------------------------------

def test_interpolant_endpoints():
    m1, m2 = rand_mdp(6), rand_mdp(7)
    assert f_interpolant(m1, m2, 1.0) is m1
    assert f_interpolant(m1, m2, 0.0) is m2


def test_interpolant_midpoint_is_average():
    m1, m2 = rand_mdp(8), rand_mdp(9)
    mf = f_interpolant(m1, m2, 0.5)
    np.testing.assert_allclose(mf.transition, (m1.transition + m2.transition) / 2, atol=1e-15)
    np.testing.assert_allclose(mf.reward, (m1.reward + m2.reward) / 2, atol=1e-15)
    np.testing.assert_allclose(mf.transition.sum(axis=2), 1.0, atol=1e-12)


@given(st.floats(0.0, 1.0))
def test_interpolant_of_self_is_self(f):
    m = rand_mdp(10)
    mf = f_interpolant(m, m, f)
    assert np.array_equal(mf.transition, m.transition) and np.array_equal(mf.reward, m.reward)


def test_interpolant_rejects_mismatch():
    with pytest.raises(ValueError):
        f_interpolant(rand_mdp(0, 5, 2), rand_mdp(1, 4, 2), 0.5)
    with pytest.raises(ValueError):
        f_interpolant(rand_mdp(0), rand_mdp(1), 1.5)


# -- distances --------------------------------------------------------------------------

def _const(row, S=3):
    return StochasticPolicy.from_probs(np.tile(row, (S, 1)))


def test_tv_identical_is_zero():
    p = rand_policy(0, 4, 3)
    assert max_tv_distance(p, p) == 0.0


def test_tv_disjoint_deterministic_is_one():
    a = np.array([[1.0, 0.0], [1.0, 0.0]])
    b = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert max_tv_distance(StochasticPolicy.from_probs(a), StochasticPolicy.from_probs(b)) == pytest.approx(1.0, abs=1e-12)


def test_tv_arithmetic():
    assert max_tv_distance(_const([0.7, 0.3]), _const([0.5, 0.5])) == pytest.approx(0.2, abs=1e-12)


def test_kl_identical_is_zero():
    p = rand_policy(1, 4, 3)
    assert kl_divergence(p, p, np.full(4, 0.25)) == pytest.approx(0.0, abs=1e-12)


def test_kl_arithmetic():
    val = kl_divergence(_const([0.9, 0.1], 1), _const([0.5, 0.5], 1), np.ones(1))
    assert val == pytest.approx(0.9 * np.log(1.8) + 0.1 * np.log(0.2), abs=1e-12)
    assert val == pytest.approx(0.368, abs=5e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 6))
def test_pinsker(seed, A):
    p, q = rand_policy(seed, 5, A, 3.0), rand_policy(seed + 7, 5, A, 3.0)
    assert np.all(2 * tv_per_state(p, q) ** 2 <= kl_per_state(p, q) + 1e-12)


def test_kl_accepts_state_action_weights():
    p, q = rand_policy(2, 4, 3), rand_policy(3, 4, 3)
    w_sa = np.full((4, 3), 1 / 12)
    assert kl_divergence(p, q, w_sa) == pytest.approx(kl_divergence(p, q, np.full(4, 0.25)), abs=1e-14)


def test_d_cql_values():
    p = StochasticPolicy.from_probs(np.array([[1.0, 0.0]]))
    u = StochasticPolicy.uniform(1, 2)
    assert d_cql(p, u, 0) == pytest.approx(1.0, abs=1e-12)
    assert d_cql(u, u, 0) == pytest.approx(0.0, abs=1e-15)


def test_d_cql_direct_sum():
    p, q = rand_policy(4, 3, 4), rand_policy(5, 3, 4)
    for s in range(3):
        direct = sum(p.probs[s, a] * (p.probs[s, a] / q.probs[s, a] - 1) for a in range(4))
        assert d_cql(p, q, s) == pytest.approx(direct, abs=1e-12)
        assert d_cql(p, q, s) >= 0


def test_optimal_q_dominates_any_policy():
    m = rand_mdp(11, 6, 3)
    qs = optimal_q(m)
    for seed in range(5):
        pi = rand_policy(seed, 6, 3, 3.0)
        assert np.all(exact_q(m, pi) <= qs + 1e-8)
