import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from merpo.mdp import (
    StochasticPolicy,
    discounted_marginal,
    exact_q,
    expected_return,
    tv_per_state,
)
from merpo.models import ModelParams
from merpo.rac import (
    RacConfig,
    behavior_divergence,
    conservative_evaluate,
    improve_policy,
    improvement_objective,
    meta_divergence,
    penalty_report,
    penalty_vector,
    run_rac,
    sampled_rollout_mdp,
    tune_beta,
    tune_lambda,
)
from merpo.rng import stream
from merpo.tasks import TaskSpec, collect_dataset, induce_empirical, make_behavior_policy
from conftest import rand_mdp, rand_policy


def brute_force_evaluate(policy, emp_mdp, learnt, d, rho, beta, f, sweeps, bound):
    """Loop-by-loop penalized f-interpolated backup, written independently."""
    S, A = emp_mdp.reward.shape
    g = learnt.gamma
    q = np.zeros((S, A))
    for _ in range(sweeps):
        v = [sum(policy.probs[s, a] * q[s, a] for a in range(A)) for s in range(S)]
        new = np.zeros((S, A))
        for s in range(S):
            for a in range(A):
                b_emp = emp_mdp.reward[s, a] + g * sum(emp_mdp.transition[s, a, t] * v[t] for t in range(S))
                b_mod = learnt.reward[s, a] + g * sum(learnt.transition[s, a, t] * v[t] for t in range(S))
                d_f = max(f * d[s, a] + (1 - f) * rho[s, a], 1e-12)
                val = f * b_emp + (1 - f) * b_mod - beta * (rho[s, a] - d[s, a]) / d_f
                new[s, a] = min(max(val, -bound), bound)
        q = new
    return q


def _instance(seed, S=4, A=2, n=60):
    m = rand_mdp(seed, S, A)
    learnt = rand_mdp(seed + 1000, S, A)
    data = collect_dataset(m, rand_policy(seed, S, A), n, seed=seed)
    return m, learnt, data, induce_empirical(data, m)


@pytest.mark.parametrize("seed", range(25))
def test_evaluation_matches_brute_force(seed):
    m, learnt, data, emp = _instance(seed)
    pi = rand_policy(seed + 1, 4, 2)
    cfg = RacConfig(beta=1.0, eval_sweeps=40, eval_tol=0.0)
    rho = discounted_marginal(learnt, pi)
    ours = conservative_evaluate(pi, emp, learnt, cfg)
    bound = cfg.q_clip * max(emp.mdp.r_max, learnt.r_max) / (1 - m.gamma)
    ref = brute_force_evaluate(pi, emp.mdp, learnt, emp.marginal, rho, 1.0, cfg.f, 40, bound)
    assert np.abs(ours - ref).max() <= 1e-10


def test_no_penalty_consistent_models_give_exact_q():
    m = rand_mdp(3, 5, 2)
    pi = rand_policy(2, 5, 2)
    data = collect_dataset(m, pi, 10, seed=0)
    emp = induce_empirical(data, m)
    emp = type(emp)(m, emp.support, emp.counts, emp.marginal)
    q = conservative_evaluate(pi, emp, m, RacConfig(beta=0.0, eval_sweeps=10_000, eval_tol=1e-12))
    np.testing.assert_allclose(q, exact_q(m, pi), atol=1e-6)


def test_f_to_one_gives_empirical_backup():
    m, learnt, data, emp = _instance(4)
    pi = rand_policy(5, 4, 2)
    cfg = RacConfig(beta=0.0, f=1 - 1e-9, eval_sweeps=5000, eval_tol=1e-12)
    q = conservative_evaluate(pi, emp, learnt, cfg)
    np.testing.assert_allclose(q, exact_q(emp.mdp, pi), atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        RacConfig(f=1.0)
    with pytest.raises(ValueError):
        RacConfig(alpha=1.5)
    with pytest.raises(ValueError):
        RacConfig(improvement_variant="other")


# -- penalty ------------------------------------------------------------------------

def test_nu_zero_when_rho_equals_d():
    m = rand_mdp(6, 4, 2)
    pi = rand_policy(0, 4, 2)
    rho = discounted_marginal(m, pi)
    rep = penalty_report(pi, rho, m, 0.5)
    assert rep.nu == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(rep.d_f, rho)


@pytest.mark.parametrize("seed", range(200))
def test_nu_nonnegative_and_increasing_in_f(seed):
    rng = stream(seed, "nu")
    S, A = int(rng.integers(2, 7)), int(rng.integers(1, 4))
    m = rand_mdp(seed, S, A)
    pi = StochasticPolicy(rng.normal(size=(S, A)) * 2)
    data = collect_dataset(m, StochasticPolicy(rng.normal(size=(S, A))), int(rng.integers(5, 300)), seed=seed)
    nus = [penalty_report(pi, data.marginal(), m, f).nu for f in np.linspace(0.05, 0.95, 10)]
    assert min(nus) >= -1e-10
    assert all(b >= a - 1e-10 for a, b in zip(nus, nus[1:]))
    assert penalty_report(pi, data.marginal(), m, 0.8).nu >= penalty_report(pi, data.marginal(), m, 0.2).nu - 1e-10


def test_penalty_vector_floor():
    v = penalty_vector(np.zeros((1, 2)), np.zeros((1, 2)), 0.5, 1.0)
    assert np.all(np.isfinite(v)) and np.all(v == 0)


@pytest.mark.parametrize("seed", range(50))
def test_conservatism_with_true_model(seed):
    m = rand_mdp(seed, 4, 2)
    pi = rand_policy(seed, 4, 2)
    data = collect_dataset(m, rand_policy(seed + 1, 4, 2), 80, seed=seed)
    emp = induce_empirical(data, m)
    emp = type(emp)(m, emp.support, emp.counts, emp.marginal)  # empirical branch exact too
    q = conservative_evaluate(pi, emp, m, RacConfig(beta=1.0, eval_sweeps=2000, eval_tol=1e-12))
    rho = discounted_marginal(m, pi)
    q_true = exact_q(m, pi)
    # expected penalty under the policy's own marginal is nu >= 0
    assert (rho * q).sum() <= (rho * q_true).sum() + 1e-6


# -- improvement --------------------------------------------------------------------

@pytest.fixture(scope="module")
def setting(grid_task=None):
    from merpo.tasks import TaskFamily, sample_tasks
    task = sample_tasks(TaskFamily("gridworld_wind", 4, seed=1), 1)[0]
    beta = make_behavior_policy(task, "medium")
    data = collect_dataset(task, beta, 3000, seed=0, quality="medium")
    q = np.random.default_rng(0).normal(size=(16, 5))
    rho = discounted_marginal(task, beta)
    return task, data, q, rho


def test_bc_limit_kl_practical(setting):
    task, data, q, rho = setting
    cfg = RacConfig(alpha=1.0, lam=1e6, improvement_variant="kl_practical", improve_steps=200)
    pi_c = rand_policy(3, 16, 5)
    out = improve_policy(q, data, pi_c, StochasticPolicy.uniform(16, 5), cfg, rho)
    supported = data.count_sa.sum(axis=1) > 0
    target = StochasticPolicy.from_probs(data.behavior_conditional(cfg.bc_pseudo_count))
    assert tv_per_state(out, target)[supported].max() <= 0.01


def test_meta_limit_tv_theory(setting):
    task, data, q, rho = setting
    pi_c = rand_policy(4, 16, 5)
    out = improve_policy(q, data, pi_c, pi_c, RacConfig(alpha=0.0, lam=1e6, improvement_variant="tv_theory"), rho)
    assert tv_per_state(out, pi_c).max() <= 0.01


def test_alpha_zero_objective_is_value_minus_meta_kl(setting):
    task, data, q, rho = setting
    pi, pi_c = rand_policy(5, 16, 5), rand_policy(6, 16, 5)
    lam = 0.7
    w = rho.sum(axis=1)
    direct = sum(w[s] * sum(pi.probs[s, a] * q[s, a] for a in range(5)) for s in range(16)) - lam * sum(
        w[s] * sum(pi.probs[s, a] * (np.log(pi.probs[s, a]) - np.log(pi_c.probs[s, a])) for a in range(5))
        for s in range(16))
    for variant in ("kl_practical", "tv_theory"):
        val = improvement_objective(pi, q, data, pi_c, RacConfig(alpha=0.0, lam=lam, improvement_variant=variant), rho)
        assert val == pytest.approx(direct, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("variant", ["kl_practical", "tv_theory"])
def test_zero_lambda_exploits_q(setting, variant):
    task, data, q, rho = setting
    cfg = RacConfig(lam=0.0, improvement_variant=variant, improve_steps=200)
    out = improve_policy(q, data, StochasticPolicy.uniform(16, 5), StochasticPolicy.uniform(16, 5), cfg, rho)
    w = rho.sum(axis=1)
    greedy = (w * q.max(axis=1)).sum()
    assert (w * (out.probs * q).sum(axis=1)).sum() >= greedy - 1e-6 - 1e-3 * (variant == "kl_practical")


def test_kl_practical_objective_non_decreasing(setting):
    task, data, q, rho = setting
    cfg = RacConfig(lam=2.0, improve_steps=30)
    trace = []
    improve_policy(q, data, rand_policy(7, 16, 5), rand_policy(8, 16, 5), cfg, rho, trace=trace)
    assert len(trace) > 1
    assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))


@pytest.mark.parametrize("seed", range(10))
def test_tv_theory_is_per_state_argmax(setting, seed):
    task, data, q, rho = setting
    cfg = RacConfig(alpha=0.4, lam=0.8, improvement_variant="tv_theory")
    pi_c = rand_policy(seed, 16, 5)
    out = improve_policy(q, data, pi_c, pi_c, cfg, rho)
    base = improvement_objective(out, q, data, pi_c, cfg, rho, per_state=True)
    rng = np.random.default_rng(seed)
    for _ in range(20):
        d = rng.normal(size=(16, 5))
        d -= d.mean(axis=1, keepdims=True)
        d *= 1e-3 / np.linalg.norm(d, axis=1, keepdims=True)
        p = np.clip(out.probs + d, 1e-300, None)
        p /= p.sum(axis=1, keepdims=True)
        val = improvement_objective(StochasticPolicy.from_probs(p), q, data, pi_c, cfg, rho, per_state=True)
        assert np.all(val <= base + 1e-8)


def test_improve_accepts_policy_reference(setting):
    task, data, q, rho = setting
    beta = make_behavior_policy(task, "medium")
    out = improve_policy(q, beta, beta, beta, RacConfig(alpha=1.0, lam=1e6, improvement_variant="tv_theory"), rho)
    assert tv_per_state(out, beta).max() < 0.01
    with pytest.raises(TypeError):
        improve_policy(q, "data", beta, beta, RacConfig(), rho)


def test_divergences_zero_at_reference(setting):
    task, data, q, rho = setting
    pb = StochasticPolicy.from_probs(data.behavior_conditional(RacConfig().bc_pseudo_count))
    assert behavior_divergence(pb, data, RacConfig()) == pytest.approx(0.0, abs=1e-12)
    assert meta_divergence(pb, pb, rho) == 0.0


# -- dual updates -------------------------------------------------------------------

def test_tune_beta_examples():
    q = np.array([[2.0, 0.0]])
    rho, d = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    assert tune_beta(q, rho, d, 0.3, tau=2.0, lr=0.1) == 0.3
    assert tune_beta(q, rho, d, 0.3, tau=1.0, lr=0.1) > 0.3
    assert tune_beta(q, rho, d, 0.05, tau=10.0, lr=1.0) == 0.0
    assert tune_beta(q, rho, d, 0.3, tau=2.0, lr=0.1, log_space=True) == 0.3
    assert tune_beta(q, rho, d, 0.3, tau=100.0, lr=1.0, log_space=True) > 0


@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 1), st.floats(0, 10), st.floats(0, 2))
def test_tune_lambda_properties(db, dc, alpha, lam, lr):
    out = tune_lambda(db, dc, alpha, lam, 0.05, lr)
    assert out >= 0
    if db > 0.05 and dc > 0.05:
        assert out >= lam


def test_tune_lambda_examples():
    assert tune_lambda(0.05, 0.05, 0.4, 3.0, 0.05, 1.0) == 3.0
    assert tune_lambda(0.5, 0.5, 0.4, 3.0, 0.05, 1.0) > 3.0
    assert tune_lambda(0.0, 0.0, 0.4, 0.01, 0.05, 1.0) == 0.0


# -- full loop ----------------------------------------------------------------------

def test_zero_iterations_return_initial_policy(setting):
    task, data, q, rho = setting
    pi_c = rand_policy(9, 16, 5)
    res = run_rac(data, ModelParams.zeros(16, 5), pi_c, RacConfig(), 0, TaskSpec.of(task))
    assert res.policy is pi_c and res.history == []


def test_run_rac_history_and_determinism(setting):
    task, data, q, rho = setting
    spec = TaskSpec.of(task)
    pi_c = StochasticPolicy.uniform(16, 5)
    cfg = RacConfig(beta=0.1, lam=0.5, d_target=0.5, improvement_variant="tv_theory")
    a = run_rac(data, ModelParams.zeros(16, 5), pi_c, cfg, 5, spec, evaluate=lambda p: expected_return(task, p))
    b = run_rac(data, ModelParams.zeros(16, 5), pi_c, cfg, 5, spec, evaluate=lambda p: expected_return(task, p))
    assert [r["iter"] for r in a.history] == [1, 2, 3, 4, 5]
    assert set(a.history[0]) == {"iter", "nu", "div_beta", "div_c", "beta", "lambda", "J_true"}
    assert np.array_equal(a.q, b.q) and np.array_equal(a.policy.logits, b.policy.logits)
    policy, qq = a
    assert policy is a.policy


def test_run_rac_needs_a_model(setting):
    task, data, q, rho = setting
    with pytest.raises(ValueError):
        run_rac(data, None, StochasticPolicy.uniform(16, 5), RacConfig(), 1, TaskSpec.of(task))


def test_model_free_mode_has_no_penalty(setting):
    task, data, q, rho = setting
    res = run_rac(data, None, StochasticPolicy.uniform(16, 5), RacConfig(model_free=True), 3, TaskSpec.of(task))
    assert all(r["nu"] == 0.0 for r in res.history)
    np.testing.assert_array_equal(res.rho, data.marginal())


def test_good_data_random_meta_beats_meta_only():
    from merpo.tasks import TaskFamily, sample_tasks
    fam = TaskFamily("gridworld_wind", 4, seed=11)
    wins = 0
    cfg = RacConfig(beta=0.1, lam=0.5, d_target=0.5, improvement_variant="tv_theory")
    tasks = sample_tasks(fam, 50)
    for k, task in enumerate(tasks):
        data = collect_dataset(task, make_behavior_policy(task, "expert"), 1000, seed=k, quality="expert")
        spec, u = TaskSpec.of(task), StochasticPolicy.uniform(16, 5)
        learnt = induce_empirical(data, task).mdp
        j = [expected_return(task, run_rac(data, None, u, cfg.replace(alpha=a), 30, spec, learnt=learnt).policy)
             for a in (0.4, 0.0)]
        wins += j[0] > j[1]
    assert wins >= 40


def test_safe_improvement_with_exact_model_full_coverage():
    from merpo.tasks import TaskFamily, sample_tasks
    fam = TaskFamily("gridworld_wind", 4, seed=12)
    ok = 0
    cfg = RacConfig(beta=0.1, lam=0.5, d_target=0.5, improvement_variant="tv_theory")
    for k, task in enumerate(sample_tasks(fam, 50)):
        beta = make_behavior_policy(task, "medium")
        data = collect_dataset(task, beta, 20_000, seed=k, quality="medium")
        res = run_rac(data, None, StochasticPolicy.uniform(16, 5), cfg, 30, TaskSpec.of(task), learnt=task)
        tol = 0.01 * task.r_max / (1 - task.gamma)
        ok += expected_return(task, res.policy) >= expected_return(task, beta) - tol
    assert ok >= 45


def test_sampled_rollouts_approach_model():
    m, learnt, data, emp = _instance(8, n=200)
    pi = rand_policy(1, 4, 2)
    mdp, rho = sampled_rollout_mdp(pi, learnt, data, 1, 200_000, stream(0, "roll"))
    seen = rho > 0
    assert np.abs(mdp.transition - learnt.transition)[seen].max() < 0.05
    assert rho.sum() == pytest.approx(1.0)
