import json

import numpy as np
import pytest

from irgame.decomposition import subgames
from irgame.dynamics import NodeState, attacker_step, negbin_rows, observation_model
from irgame.exact import zone_mdp_enumeration
from irgame.infrastructure import load_config
from irgame.stopping import (
    THETA_FLOOR,
    SpsaParams,
    StoppingPomdp,
    ThresholdPolicy,
    ThresholdStrategy,
    ZoneMdp,
    belief_grid_oracle,
    build_stopping_pomdp,
    build_zone_mdp,
    count_reversals,
    defender_best_response,
    evaluate_threshold,
    horizon_for,
    mlr_line_patterns,
    project_theta,
    simplex_grid,
    single_stop_value,
    solve_zone_mdp,
    spsa_fit_threshold,
    stage_pq,
    threshold_decision,
    tp2_check,
    tp2_summary,
)
from irgame.strategies import STATIC_ATTACKER_TABLE


@pytest.fixture(scope="module")
def tiny2():
    cfg = load_config("tiny2.cfg")
    return cfg, observation_model(cfg)


def small_pomdp(p=0.2, q=0.3, cost=1.0, gamma=0.9):
    rows = negbin_rows(6, 2.0, (0.5, 1.5, 4.0))
    r = 0.8
    u = np.array([[r, r - cost], [r, r - cost], [r - 1, r - 1 - cost]])
    return StoppingPomdp(p, q, rows, u, gamma)


def test_horizon():
    assert horizon_for(0.9) == 88
    assert 0.9**88 < 1e-4 <= 0.9**87


def test_static_stage_continue_matrix(tiny2):
    cfg, model = tiny2
    P = build_stopping_pomdp(subgames(cfg)[0], 1, cfg.n_defender_actions - 1, STATIC_ATTACKER_TABLE, model, cfg)
    assert (P.p, P.q) == pytest.approx((0.2, 0.105))
    np.testing.assert_allclose(P.continue_matrix, [[0.8, 0.2, 0], [0, 0.895, 0.105], [0, 0, 1]], atol=1e-15)
    np.testing.assert_array_equal(P.stop_matrix, np.tile([1.0, 0, 0], (3, 1)))


def test_continue_matrix_against_sampled_transitions():
    rng = np.random.default_rng(0)
    n = 100_000
    counts = np.zeros((2, 3))
    for c, s in ((0, NodeState(1, 0, 0, 1)), (1, NodeState(1, 1, 0, 1))):
        acts = rng.choice(4, size=n, p=STATIC_ATTACKER_TABLE[c])
        for a in acts:
            nxt = attacker_step(s, int(a), 0, rng)
            counts[c, nxt.recon + nxt.intrusion] += 1
    freq = counts / n
    np.testing.assert_allclose(freq, [[0.8, 0.2, 0], [0, 0.895, 0.105]], atol=0.005)


def test_absorbing_healthy_when_no_recon():
    P = small_pomdp(p=0.0)
    assert P.continue_matrix[0, 0] == 1.0
    with pytest.raises(ValueError):
        stage_pq(np.zeros((3, 4)), 0.3, 0.4)


def test_tp2_examples():
    p, q = 0.3, 0.2
    M = np.array([[1 - p, p, 0], [0, 1 - q, q], [0, 0, 1]])
    ok, minor = tp2_check(M)
    assert ok and minor is None
    assert tp2_summary(M) == (1.0, 0.0)
    ok, minor = tp2_check([[0.1, 0.9], [0.9, 0.1]])
    assert not ok
    assert minor.value == pytest.approx(0.1 * 0.1 - 0.9 * 0.9)
    assert (minor.rows, minor.cols) == ((0, 1), (0, 1))
    assert tp2_check(np.eye(3))[0]
    frac, worst = tp2_summary([[0.1, 0.9], [0.9, 0.1]])
    assert frac == 0.0 and worst < 0


def test_zone_mdp_closed_forms():
    single = ZoneMdp((1,), np.array([[2.0]]), np.array([[0]]), 0.9)
    V, pol = solve_zone_mdp(single, tol=1e-12)
    assert V[0] == pytest.approx(20.0, abs=1e-9)
    mdp = ZoneMdp((1, 2, 3), np.array([[1.0, 3.0, 2.0], [0.0, -1.0, 5.0]]), np.array([[0, 1, 0], [0, 1, 1]]), 0.0)
    V, pol = solve_zone_mdp(mdp)
    assert list(pol) == [2, 3]
    np.testing.assert_allclose(V, [3.0, 5.0])


def test_zone_mdp_matches_enumeration(tiny2):
    cfg, _ = tiny2
    for sub in subgames(cfg):
        mdp = build_zone_mdp(sub, cfg)
        V, pol = solve_zone_mdp(mdp, tol=1e-12)
        V2, pol2 = zone_mdp_enumeration(mdp)
        assert list(pol) == list(pol2)
        np.testing.assert_allclose(V, V2, atol=1e-9)


def test_value_iteration_contracts(tiny2):
    cfg, _ = tiny2
    hist = []
    solve_zone_mdp(build_zone_mdp(subgames(load_config("target64.cfg"))[40], load_config("target64.cfg")), history=hist)
    r = np.array(hist)
    assert np.all(r[1:] <= cfg.gamma * r[:-1] + 1e-12)


def test_threshold_decisions():
    pol = ThresholdPolicy(1.0, 0.5)
    assert threshold_decision(pol, [1, 0, 0]) == "C"
    assert threshold_decision(ThresholdPolicy(3.0, 0.01), [1, 0, 0]) == "C"
    assert threshold_decision(pol, [0, 0, 1]) == "S"
    assert threshold_decision(pol, [0.5, 0.5, 0.0]) == "C"  # tie goes to continue
    with pytest.raises(ValueError):
        ThresholdPolicy(0.5, 0.5)


def test_decision_depends_on_weighted_sum_only():
    pol = ThresholdPolicy(2.0, 0.7)
    rng = np.random.default_rng(1)
    for _ in range(200):
        b = rng.dirichlet(np.ones(3))
        # move mass between classes 1 and 2 keeping b1 + 2 b2 fixed
        shift = rng.uniform(-1, 1) * min(b[2], b[1] / 2)
        c = np.array([b[0] + shift, b[1] - 2 * shift, b[2] + shift])
        if c.min() < 0:
            continue
        assert threshold_decision(pol, b) == threshold_decision(pol, c)


def test_projection():
    np.testing.assert_array_equal(project_theta([0.2, -1.0]), [1.0, THETA_FLOOR])
    assert THETA_FLOOR == 1e-6


def test_spsa_replay():
    P = small_pomdp()
    params = SpsaParams(N=8, episodes=50, eval_episodes=100)
    t1, t2 = [], []
    a = spsa_fit_threshold(P, params, np.random.default_rng(3), t1)
    b = spsa_fit_threshold(P, params, np.random.default_rng(3), t2)
    assert t1 == t2 and a == b
    assert len(t1) == params.N + 1
    # the returned policy is the best-scored iterate
    assert tuple(a.theta) == max(t1, key=lambda x: x[1])[0]


def test_grid_corners():
    corners = simplex_grid(1)
    assert sorted(map(tuple, corners)) == sorted(map(tuple, np.eye(3)))
    assert tuple(corners[0]) == (1.0, 0.0, 0.0)
    assert len(simplex_grid(40)) == 41 * 42 // 2


def test_grid_oracle_structure_and_single_stop():
    P = small_pomdp()
    sol = belief_grid_oracle(P, 20)
    assert count_reversals(mlr_line_patterns(sol)) == 0
    assert not sol.stop[0]
    assert single_stop_value(P, 20) == pytest.approx(sol.values[0], abs=1e-6)
    # residuals contract
    r = np.array(sol.residuals)
    assert np.all(r[1:] <= P.gamma * r[:-1] + 1e-12)


def test_reversal_counter():
    assert count_reversals(["CCSS", "CSSS", "SSSS"]) == 0
    assert count_reversals(["CSCS"]) == 1


def test_oracle_budget_guard():
    P = StoppingPomdp(0.1, 0.1, np.full((3, 100), 0.01), np.zeros((3, 2)), 0.9)
    with pytest.raises(ValueError, match="budget"):
        belief_grid_oracle(P, 40)


def test_threshold_value_close_to_oracle():
    P = small_pomdp(cost=0.5)
    sol = belief_grid_oracle(P, 30)
    pol = spsa_fit_threshold(P, SpsaParams(N=20, episodes=100, eval_episodes=400), np.random.default_rng(4))
    v = evaluate_threshold(P, pol.theta, 4000, np.random.default_rng(5)).mean()
    assert v >= 0.9 * sol.values[0]


def test_threshold_strategy(tiny2):
    cfg, model = tiny2
    br = defender_best_response(subgames(cfg)[1], STATIC_ATTACKER_TABLE, model, cfg,
                                SpsaParams(N=5, episodes=50, eval_episodes=100), np.random.default_rng(6))
    assert len(br.which) == cfg.n_zones and len(br.thetas) == cfg.n_zones
    back = ThresholdStrategy.from_dict(json.loads(json.dumps(br.to_dict())))
    assert back == br
    stage = br.zone_stage(cfg.n_zones)
    np.testing.assert_allclose(stage.sum(axis=1), 1.0)
    acts = br.act(np.array([1, 1]), np.array([[1.0, 0, 0], [0, 0, 1.0]]), np.array([0, 0]), np.zeros(2))
    assert acts[0] == 0 and acts[1] == br.which[1]
