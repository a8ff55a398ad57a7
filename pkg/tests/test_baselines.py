import numpy as np
import pytest

from pqr.approx import fit_policy_mle
from pqr.baselines import (
    GroundedEstimate,
    RankDeficientFeaturesError,
    maxent_irl_grounded,
    normalize_by_anchor,
    select_alpha,
    spl_gd,
)
from pqr.demos import rollout
from pqr.estimators import PqrConfig
from pqr.soft_mdp import TabularMdp, solve_soft


def linear_reward_mdp(n_states=4, n_actions=3, gamma=0.8, stochastic=False, seed=0):
    # reward linear in (state index, action index) so the least-squares
    # baseline's model class contains the truth
    s = np.arange(n_states, dtype=float)[:, None]
    a = np.arange(n_actions, dtype=float)[None, :]
    reward = 0.7 * s - 0.3 * a + 0.2
    if stochastic:
        rng = np.random.default_rng(seed)
        transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    else:
        transition = np.zeros((n_states, n_actions, n_states))
        for i in range(n_states):
            for j in range(n_actions):
                transition[i, j, (i + j + 1) % n_states] = 1.0
    return TabularMdp(transition=transition, reward=reward, gamma=gamma, alpha=1.0)


def test_grounded_estimate_exact_at_reference(sol2x2):
    pol = fit_policy_mle(sol2x2)
    q_ref = float(sol2x2.q[0, 0])
    est = maxent_irl_grounded(None, pol, 1.0, q_ref, reference_state=0)
    assert float(est.value([0], [0])[0]) == q_ref  # pinned bitwise
    assert est.offset == q_ref - float(pol.log_prob([0], [0])[0])


def test_grounded_maxent_is_value_shifted_q(mdp2x2, sol2x2):
    # alpha * log pi = q - v, so grounding at state 0 recovers q there
    # exactly and misses elsewhere by the value difference to the reference
    pol = fit_policy_mle(sol2x2)
    est = maxent_irl_grounded(None, pol, 1.0, float(sol2x2.q[0, 0]), reference_state=0)
    got = est.value([0, 0, 1, 1], [0, 1, 0, 1])
    np.testing.assert_allclose(got[:2], sol2x2.q[0], rtol=0, atol=1e-8)
    shift = sol2x2.v[1] - sol2x2.v[0]
    np.testing.assert_allclose(got[2:], sol2x2.q[1] - shift, rtol=0, atol=1e-8)


def test_grounded_difference_scales_with_alpha(sol2x2):
    pol = fit_policy_mle(sol2x2)
    one = maxent_irl_grounded(None, pol, 1.0, 0.0, reference_state=0)
    two = maxent_irl_grounded(None, pol, 2.0, 0.0, reference_state=0)
    s = np.array([0, 1, 1])
    a = np.array([1, 0, 1])
    anchor = np.zeros(3, dtype=np.int64)
    d1 = one.value(s, a) - one.value(s, anchor)
    d2 = two.value(s, a) - two.value(s, anchor)
    np.testing.assert_allclose(d2, 2.0 * d1, rtol=0, atol=1e-12)


def test_regrounding_is_identity(sol2x2):
    pol = fit_policy_mle(sol2x2)
    q_ref = float(sol2x2.q[0, 0])
    first = maxent_irl_grounded(None, pol, 1.0, q_ref, reference_state=0)
    again = GroundedEstimate(raw=first.value, reference_state=0,
                             reference_action=0, grounded_value=q_ref)
    assert again.offset == 0.0
    s = np.array([0, 1, 0, 1])
    a = np.array([0, 0, 1, 1])
    np.testing.assert_array_equal(again.value(s, a), first.value(s, a))


def test_grounding_reference_must_be_evaluable():
    def raw(states, actions):
        raise KeyError("nope")

    with pytest.raises(ValueError, match="not evaluable"):
        GroundedEstimate(raw=raw, reference_state=0, reference_action=0, grounded_value=1.0)
    with pytest.raises(ValueError, match="not finite"):
        GroundedEstimate(raw=lambda s, a: np.array([np.nan]), reference_state=0,
                         reference_action=0, grounded_value=1.0)


def test_normalize_by_anchor_vanishes_at_anchor(sol2x2):
    fn = normalize_by_anchor(lambda s, a: sol2x2.q[np.asarray(s), np.asarray(a)], 0)
    s = np.array([0, 1, 0])
    np.testing.assert_array_equal(fn(s, np.zeros(3, dtype=np.int64)), 0.0)
    np.testing.assert_allclose(fn(s, np.array([1, 1, 1])),
                               sol2x2.q[s, 1] - sol2x2.q[s, 0], rtol=0, atol=1e-12)


def test_spl_recovers_linear_reward_exactly():
    # deterministic transitions make the one-step targets equal the reward
    # pointwise, so least squares returns the generating coefficients
    mdp = linear_reward_mdp(stochastic=False)
    sol = solve_soft(mdp, tol=1e-13)
    ds = rollout(mdp, np.full((4, 3), 1.0 / 3.0), 500, seed=3)
    q_fn = lambda s, a: sol.q[np.asarray(s, np.int64), np.asarray(a, np.int64)]
    v_fn = lambda s: sol.v[np.asarray(s, np.int64)]
    est = spl_gd(ds, q_fn, v_fn, mdp.gamma)
    assert est.columns == ["s1", "a", "intercept"]
    np.testing.assert_allclose(est.coefficients, [0.7, -0.3, 0.2], rtol=0, atol=1e-9)
    assert est.residual_mse < 1e-18
    np.testing.assert_allclose(est.reward([2], [1]), 0.7 * 2 - 0.3 + 0.2,
                               rtol=0, atol=1e-9)


def test_spl_averages_out_transition_noise():
    # with stochastic transitions the targets are noisy around the reward;
    # a long rollout still pins the coefficients
    mdp = linear_reward_mdp(stochastic=True, seed=5)
    sol = solve_soft(mdp, tol=1e-13)
    ds = rollout(mdp, np.full((4, 3), 1.0 / 3.0), 100_000, seed=9)
    q_fn = lambda s, a: sol.q[np.asarray(s, np.int64), np.asarray(a, np.int64)]
    v_fn = lambda s: sol.v[np.asarray(s, np.int64)]
    est = spl_gd(ds, q_fn, v_fn, mdp.gamma)
    np.testing.assert_allclose(est.coefficients, [0.7, -0.3, 0.2], rtol=0, atol=0.02)
    assert est.residual_mse > 1e-6  # genuinely noisy targets


def test_spl_names_the_dependent_column():
    mdp = linear_reward_mdp(stochastic=False)
    sol = solve_soft(mdp)
    ds = rollout(mdp, np.array([[0.0, 1.0, 0.0]] * 4), 200, seed=1)  # one action only
    q_fn = lambda s, a: sol.q[np.asarray(s, np.int64), np.asarray(a, np.int64)]
    v_fn = lambda s: sol.v[np.asarray(s, np.int64)]
    with pytest.raises(RankDeficientFeaturesError, match="column 'a'") as exc:
        spl_gd(ds, q_fn, v_fn, mdp.gamma)
    assert exc.value.column == "a"


def test_spl_rejects_empty_dataset(mdp2x2, sol2x2):
    ds = rollout(mdp2x2, sol2x2.policy, 0, seed=0)
    with pytest.raises(ValueError, match="empty"):
        spl_gd(ds, lambda s, a: np.zeros(0), lambda s: np.zeros(0), 0.5)


def zero_anchor_mdp(alpha):
    # anchor action earns exactly zero everywhere: the premise under which
    # rewards identified at temperature 1 scale as r / alpha_true
    transition = np.full((3, 2, 3), 1.0 / 3.0)
    reward = np.array([[0.0, 0.8], [0.0, -0.4], [0.0, 1.3]])
    return TabularMdp(transition=transition, reward=reward, gamma=0.6, alpha=alpha)


@pytest.mark.parametrize("alpha_true", [0.5, 1.0, 2.0])
def test_select_alpha_round_trip(alpha_true):
    mdp = zero_anchor_mdp(alpha_true)
    sol = solve_soft(mdp, tol=1e-13)
    ds = rollout(mdp, sol.policy, 4000, seed=2)
    r_avg = float(np.mean(mdp.reward[ds.states, ds.actions]))
    cfg = PqrConfig(gamma=0.6, alpha=123.0, policy_mode="exact", expectation_mode="exact")
    got = select_alpha(ds, r_avg, gamma=0.6, config=cfg, mdp=mdp, solution=sol)
    assert abs(got - alpha_true) < 1e-6


def test_select_alpha_rejects_zero_total_reward():
    transition = np.full((2, 2, 2), 0.5)
    mdp = TabularMdp(transition=transition, reward=np.zeros((2, 2)), gamma=0.0, alpha=1.0)
    sol = solve_soft(mdp)
    ds = rollout(mdp, sol.policy, 100, seed=0)
    cfg = PqrConfig(gamma=0.0, policy_mode="exact", expectation_mode="exact")
    with pytest.raises(ValueError, match="ill-conditioned"):
        select_alpha(ds, 0.0, gamma=0.0, config=cfg, mdp=mdp, solution=sol)


def test_select_alpha_rejects_empty_dataset(mdp2x2, sol2x2):
    ds = rollout(mdp2x2, sol2x2.policy, 0, seed=0)
    with pytest.raises(ValueError, match="non-empty"):
        select_alpha(ds, 1.0, gamma=0.5)
