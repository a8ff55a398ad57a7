import math

import numpy as np
import pytest

from pqr.approx import PolicyEstimate, TrainerConfig, fit_policy_mle
from pqr.demos import rollout
from pqr.estimators import (
    AnchorSolve,
    FqiDivergedError,
    PqrConfig,
    StageError,
    default_fqi_rounds,
    fqi_identify,
    pqr_full,
    q_estimate_from_table,
    q_estimator,
    reward_estimation,
    shaping_probe,
    solve_qa_exact,
)
from pqr.soft_mdp import SyntheticMdp, TabularMdp, random_tabular_mdp


def test_anchor_solve_constant_closed_form():
    # with a uniform log-policy and zero anchor reward the recursion has the
    # constant fixed point -gamma * alpha * log(1/A) / (1 - gamma)
    for seed in (0, 1, 2):
        base = random_tabular_mdp(5, 3, seed=seed, gamma=0.7, alpha=1.3)
        r = np.array(base.reward)
        r[:, base.anchor_action] = 0.0
        mdp = TabularMdp(transition=base.transition, reward=r,
                         gamma=0.7, alpha=1.3, anchor_action=base.anchor_action)
        lp = np.full((5, 3), math.log(1.0 / 3.0))
        out = solve_qa_exact(mdp, lp, tol=1e-12)
        expect = -0.7 * 1.3 * math.log(1.0 / 3.0) / (1.0 - 0.7)
        np.testing.assert_allclose(out.values, expect, rtol=0, atol=1e-10)
        assert out.converged and out.residual < 1e-12


def test_anchor_solve_matches_solver(mdp43, sol43):
    out = solve_qa_exact(mdp43, sol43.log_policy, tol=1e-12)
    np.testing.assert_allclose(out.values, sol43.q[:, mdp43.anchor_action], rtol=0, atol=1e-8)


def test_anchor_solve_parameter_overrides(mdp43, sol43):
    out = solve_qa_exact(mdp43, sol43.log_policy, gamma=0.0)
    np.testing.assert_array_equal(out.values, mdp43.anchor_reward)  # one application of g
    hot = solve_qa_exact(mdp43, sol43.log_policy, alpha=2.0)
    cold = solve_qa_exact(mdp43, sol43.log_policy, alpha=1.0)
    assert np.max(np.abs(hot.values - cold.values)) > 1e-3


def test_anchor_solve_rejects_nonfinite_log_policy(mdp2x2):
    lp = np.array([[-np.inf, 0.0], [math.log(0.5), math.log(0.5)]])
    with pytest.raises(ValueError, match="non-finite"):
        solve_qa_exact(mdp2x2, lp)


def test_exact_recovery_chain(mdp43, sol43):
    anchor = solve_qa_exact(mdp43, sol43.log_policy, tol=1e-12)
    q_est = q_estimator(sol43.log_policy, anchor, mdp43.alpha, mdp43.anchor_action)
    np.testing.assert_allclose(q_est.table(4, 3), sol43.q, rtol=0, atol=1e-8)
    re = reward_estimation(None, q_est, sol43.log_policy,
                           gamma=mdp43.gamma, alpha=mdp43.alpha,
                           anchor_action=mdp43.anchor_action, mdp=mdp43)
    np.testing.assert_allclose(re.table(4, 3), mdp43.reward, rtol=0, atol=1e-8)


def test_q_estimator_anchor_identity_is_bitwise(sol43, mdp43):
    anchor = solve_qa_exact(mdp43, sol43.log_policy, tol=1e-12)
    q_est = q_estimator(sol43.log_policy, anchor, mdp43.alpha, mdp43.anchor_action)
    states = np.arange(4)
    a_col = np.full(4, mdp43.anchor_action)
    np.testing.assert_array_equal(q_est.q_value(states, a_col),
                                  q_est.anchor_component(states))


def test_q_estimator_shift_invariance(sol43, mdp43):
    anchor = solve_qa_exact(mdp43, sol43.log_policy, tol=1e-12)
    base = q_estimator(sol43.log_policy, anchor, mdp43.alpha, mdp43.anchor_action)
    shift = np.array([0.3, -1.2, 4.0, 0.01])
    shifted = q_estimator(sol43.log_policy + shift[:, None], anchor,
                          mdp43.alpha, mdp43.anchor_action)
    np.testing.assert_allclose(shifted.table(4, 3), base.table(4, 3), rtol=0, atol=1e-12)


def test_q_estimate_from_table(sol2x2):
    q_est = q_estimate_from_table(sol2x2.q, alpha=1.0, anchor_action=0)
    np.testing.assert_array_equal(q_est.table(2, 2), sol2x2.q)
    np.testing.assert_array_equal(q_est.anchor_component([0, 1]), sol2x2.q[:, 0])


def test_default_fqi_rounds_oracle():
    assert default_fqi_rounds(0.0, 5.0) == 1
    for gamma, r in ((0.5, 1.144), (0.9, 3.0), (0.99, 0.2)):
        n = 1
        while gamma ** n * 2.0 * r / (1.0 - gamma) >= 1e-3:
            n += 1
        assert default_fqi_rounds(gamma, r) == n


def test_fqi_gamma_zero_averages_g(mdp43, sol43):
    ds = rollout(mdp43, sol43.policy, 2000, seed=5)
    g = np.array([0.4, -0.2, 1.1, 0.0])
    q_est = fqi_identify(ds, sol43.log_policy, gamma=0.0, alpha=1.0,
                         anchor_action=0, g=g)
    assert q_est.fit_info["n_rounds"] == 1
    np.testing.assert_allclose(q_est.anchor_component(np.arange(4)), g, rtol=0, atol=1e-12)
    # with g omitted the anchor values are identically zero
    zero = fqi_identify(ds, sol43.log_policy, gamma=0.0, alpha=1.0, anchor_action=0)
    np.testing.assert_array_equal(zero.anchor_component(np.arange(4)), 0.0)


def test_fqi_empirical_fixed_point(mdp2x2, sol2x2):
    ds = rollout(mdp2x2, sol2x2.policy, 100_000, seed=11)
    q_est = fqi_identify(ds, sol2x2.log_policy, gamma=0.5, alpha=1.0,
                         anchor_action=0, n_rounds=50)
    assert q_est.fit_info["regressor"] == "tabular"
    assert q_est.fit_info["n_anchor_transitions"] == int((ds.actions == 0).sum())
    err = np.max(np.abs(q_est.table(2, 2) - sol2x2.q))
    assert err < 0.01


def test_fqi_error_decays_with_rounds(mdp2x2, sol2x2):
    ds = rollout(mdp2x2, sol2x2.policy, 100_000, seed=11)
    errs = {}
    for n in (2, 5, 50):
        q_est = fqi_identify(ds, sol2x2.log_policy, gamma=0.5, alpha=1.0,
                             anchor_action=0, n_rounds=n)
        errs[n] = np.max(np.abs(q_est.table(2, 2) - sol2x2.q))
    assert errs[5] < errs[2] and errs[50] < errs[5]


def test_fqi_requires_anchor_coverage(mdp2x2):
    always_other = np.array([[0.0, 1.0], [0.0, 1.0]])
    ds = rollout(mdp2x2, always_other, 500, seed=0)
    with pytest.raises(ValueError, match="no anchor-action transitions"):
        fqi_identify(ds, np.log(np.full((2, 2), 0.5)), gamma=0.5, alpha=1.0,
                     anchor_action=0)


def test_fqi_divergence_names_the_round():
    env = SyntheticMdp.from_seed(p=2, seed=6)
    ds = rollout(env, lambda s: np.full(5, 0.2), 300, seed=3)
    pol = fit_policy_mle(ds, TrainerConfig(hidden_width=0, iterations=50, seed=0))
    with pytest.raises(FqiDivergedError, match="round 1") as exc:
        fqi_identify(ds, pol, gamma=0.9, alpha=1.0, anchor_action=0, n_rounds=5,
                     trainer=TrainerConfig(hidden_width=8, learning_rate=1e9,
                                           iterations=100, seed=0))
    assert exc.value.round_index == 1


def test_fqi_default_round_count_is_recorded(mdp2x2, sol2x2):
    ds = rollout(mdp2x2, sol2x2.policy, 5_000, seed=2)
    q_est = fqi_identify(ds, sol2x2.log_policy, gamma=0.5, alpha=1.0, anchor_action=0)
    info = q_est.fit_info
    assert info["n_rounds"] == len(info["rounds"])
    assert info["rounds"][0]["round"] == 1
    assert all(np.isfinite(r["train_loss"]) for r in info["rounds"])


def test_clipped_policy_keeps_identification_finite(mdp2x2, sol2x2):
    # a vanishing anchor probability must clip, not poison the targets
    ds = rollout(mdp2x2, sol2x2.policy, 2_000, seed=4)
    log_table = np.log(np.array([[1e-300, 1.0 - 1e-300], [0.5, 0.5]]))
    est = PolicyEstimate(representation="tabular", n_actions=2, log_table=log_table)
    q_est = fqi_identify(ds, est, gamma=0.5, alpha=1.0, anchor_action=0, n_rounds=20)
    assert np.all(np.isfinite(q_est.table(2, 2)))
    assert np.max(np.abs(q_est.anchor_component([0, 1]))) < 20.0  # bounded by the clip floor


def test_reward_estimation_gamma_zero_returns_q_bitwise(sol2x2, mdp2x2):
    q_est = q_estimate_from_table(sol2x2.q, alpha=1.0, anchor_action=0)
    re = reward_estimation(None, q_est, sol2x2.log_policy, gamma=0.0, alpha=1.0,
                           anchor_action=0, mdp=mdp2x2)
    # degenerate mode ignores the expectation model entirely
    assert re.provenance["mode"] == "degenerate-gamma-zero"
    s = np.array([0, 1, 1, 0])
    a = np.array([1, 0, 1, 0])
    np.testing.assert_array_equal(re.reward(s, a), q_est.q_value(s, a))


def test_reward_estimation_exact_mode_matches_manual_sums(mdp2x2, sol2x2):
    anchor = solve_qa_exact(mdp2x2, sol2x2.log_policy, tol=1e-12)
    q_est = q_estimator(sol2x2.log_policy, anchor, 1.0, 0)
    re = reward_estimation(None, q_est, sol2x2.log_policy, gamma=0.5, alpha=1.0,
                           anchor_action=0, mdp=mdp2x2)
    # straight-line oracle for the continuation expectation
    expect = np.zeros((2, 2))
    for s in range(2):
        for a in range(2):
            acc = 0.0
            for s2 in range(2):
                acc += mdp2x2.transition[s, a, s2] * (
                    -sol2x2.log_policy[s2, 0] + anchor.values[s2])
            expect[s, a] = q_est.q_value([s], [a])[0] - 0.5 * acc
    np.testing.assert_allclose(re.table(2, 2), expect, rtol=0, atol=1e-12)


def test_reward_estimation_empirical_tabular(mdp2x2, sol2x2):
    ds = rollout(mdp2x2, sol2x2.policy, 100_000, seed=13)
    anchor = solve_qa_exact(mdp2x2, sol2x2.log_policy, tol=1e-12)
    q_est = q_estimator(sol2x2.log_policy, anchor, 1.0, 0)
    re = reward_estimation(ds, q_est, sol2x2.log_policy, gamma=0.5, alpha=1.0,
                           anchor_action=0)
    assert re.provenance["mode"] == "tabular-average"
    assert np.max(np.abs(re.table(2, 2) - mdp2x2.reward)) < 0.01


def test_reward_estimation_needs_data_or_mdp(sol2x2):
    q_est = q_estimate_from_table(sol2x2.q, alpha=1.0, anchor_action=0)
    with pytest.raises(ValueError, match="dataset"):
        reward_estimation(None, q_est, sol2x2.log_policy, gamma=0.5, alpha=1.0,
                          anchor_action=0)


def test_shaping_shifts_reward_by_potential_difference(mdp2x2, sol2x2):
    rng = np.random.default_rng(3)
    for _ in range(3):
        phi = rng.normal(size=2) * 2.0
        shifted = q_estimate_from_table(sol2x2.q + phi[:, None], alpha=1.0, anchor_action=0)
        re = reward_estimation(None, shifted, sol2x2.log_policy, gamma=0.5, alpha=1.0,
                               anchor_action=0, mdp=mdp2x2)
        np.testing.assert_allclose(re.table(2, 2), shaping_probe(mdp2x2, phi),
                                   rtol=0, atol=1e-10)


def test_shaping_probe_validates_phi(mdp2x2):
    with pytest.raises(ValueError, match="shape"):
        shaping_probe(mdp2x2, np.zeros(3))


def test_pqr_full_exact_chain(mdp2x2, sol2x2):
    ds = rollout(mdp2x2, sol2x2.policy, 200, seed=1)
    cfg = PqrConfig(gamma=0.5, alpha=1.0, policy_mode="exact", expectation_mode="exact")
    run = pqr_full(ds, cfg, mdp=mdp2x2, solution=sol2x2)
    np.testing.assert_allclose(run.reward_estimate.table(2, 2), mdp2x2.reward,
                               rtol=0, atol=1e-6)
    states = np.array([0, 1])
    np.testing.assert_array_equal(
        run.q_estimate.q_value(states, np.zeros(2, dtype=int)),
        run.q_estimate.anchor_component(states))
    assert run.manifest["re_mode"] == "exact-expectation"
    assert run.manifest["fqi_info"]["mode"] == "exact-fixed-point"
    assert run.manifest["policy"]["representation"] == "tabular"


def test_pqr_full_empirical_chain(mdp2x2, sol2x2):
    ds = rollout(mdp2x2, sol2x2.policy, 50_000, seed=7)
    run = pqr_full(ds, PqrConfig(gamma=0.5, alpha=1.0, seed=0))
    assert np.max(np.abs(run.reward_estimate.table(2, 2) - mdp2x2.reward)) < 0.05
    assert run.manifest["re_mode"] == "tabular-average"
    assert len(run.manifest["fqi_rounds"]) == run.manifest["fqi_info"]["n_rounds"]


def test_pqr_full_stage_tagging(mdp2x2, sol2x2):
    empty = rollout(mdp2x2, sol2x2.policy, 0, seed=0)
    with pytest.raises(StageError, match="policy-estimation") as exc:
        pqr_full(empty, PqrConfig(gamma=0.5))
    assert exc.value.stage == "policy-estimation"

    no_anchor = rollout(mdp2x2, np.array([[0.0, 1.0], [0.0, 1.0]]), 300, seed=0)
    with pytest.raises(StageError, match="anchor-identification") as exc:
        pqr_full(no_anchor, PqrConfig(gamma=0.5))
    assert exc.value.stage == "anchor-identification"


def test_pqr_full_mode_prerequisites(mdp2x2, sol2x2):
    ds = rollout(mdp2x2, sol2x2.policy, 100, seed=0)
    with pytest.raises(ValueError, match="solution"):
        pqr_full(ds, PqrConfig(gamma=0.5, policy_mode="exact"))
    with pytest.raises(ValueError, match="environment"):
        pqr_full(ds, PqrConfig(gamma=0.5, expectation_mode="exact"))


def test_pqr_config_roundtrip_and_derived_seeds():
    cfg = PqrConfig(gamma=0.9, alpha=2.0, seed=5, clip_floor=1e-5,
                    fqi_trainer=TrainerConfig(hidden_width=8, seed=77))
    back = PqrConfig.from_dict(cfg.to_dict())
    assert back == cfg
    trainers = cfg.stage_trainers()
    assert trainers["policy"].seed == 5 + 11
    assert trainers["fqi"].seed == 77  # explicit trainer wins
    assert trainers["re"].seed == 5 + 37
    assert trainers["policy"].clip_floor == 1e-5


def test_anchor_solve_is_frozen(mdp2x2, sol2x2):
    out = solve_qa_exact(mdp2x2, sol2x2.log_policy)
    assert isinstance(out, AnchorSolve)
    with pytest.raises(AttributeError):
        out.residual = 0.0
