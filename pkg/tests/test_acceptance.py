"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per
criterion is printed in the terminal summary (see ``conftest.py``).
"""
from __future__ import annotations

import itertools
import time

import numpy as np
import pytest

from irgame.attacker import (
    LinearSoftmaxPolicy,
    PpoParams,
    features,
    make_batch,
    surrogate,
    surrogate_grad,
)
from irgame.decomposition import CompositeStrategy, subgames
from irgame.dynamics import (
    N_CLASSES,
    GlobalState,
    NodeState,
    belief_update,
    negbin_rows,
    observation_model,
    stage_utility,
    workflow_utility,
)
from irgame.equilibrium import (
    AverageStrategy,
    SolverSettings,
    best_response_attacker,
    best_response_defender,
    dfsp_run,
    exploitability,
)
from irgame.exact import (
    TinyGame,
    brute_force_equilibrium,
    composite_value,
    global_best_response_value,
    node_best_response,
    tiny_game_payoff,
    zone_mdp_enumeration,
)
from irgame.infrastructure import load_config, parse_config
from irgame.simulation import mean_and_se, run_episodes
from irgame.stopping import (
    SpsaParams,
    StoppingPomdp,
    belief_grid_oracle,
    build_zone_mdp,
    count_reversals,
    evaluate_threshold,
    mlr_line_patterns,
    solve_zone_mdp,
    spsa_fit_threshold,
    tp2_check,
)
from irgame.strategies import (
    STATIC_ATTACKER_TABLE,
    StrategyProfile,
    TableAttacker,
    TableDefender,
    constant_defender,
    static_strategies,
    uniform_attacker,
)
from irgame.sysid import (
    EmpiricalObservationModel,
    estimate_observation_model,
    generate_traces,
    total_variation,
    validate_mlr,
)

pytestmark = pytest.mark.acceptance


class Budget:
    def __init__(self, seconds: float):
        self.seconds = seconds

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        return False

    def check(self):
        assert self.elapsed < self.seconds, f"took {self.elapsed:.1f}s, budget {self.seconds}s"


@pytest.fixture(scope="module")
def tiny2():
    cfg = load_config("tiny2.cfg")
    return cfg, observation_model(cfg)


@pytest.fixture(scope="module")
def target64():
    return load_config("target64.cfg")


def random_state(cfg, rng) -> GlobalState:
    nodes = []
    for _ in range(cfg.n_nodes):
        z = int(rng.integers(cfg.n_zones))
        recon = int(rng.integers(2))
        intr = recon * int(rng.integers(2))
        nodes.append(NodeState(z, recon, intr, int(cfg.zone_active[z])))
    return GlobalState(tuple(nodes))


# random TP-2 stopping problems shared by the structure and SPSA criteria


def random_stopping_pomdp(rng) -> StoppingPomdp:
    p, q = rng.uniform(0.05, 0.5, 2)
    means = np.sort(rng.uniform(0.5, 6, 3))
    rows = negbin_rows(10, rng.uniform(1, 5), means)
    w = rng.integers(1, 4)
    c = rng.choice([0.1, 0.5, 1, 1.5, 2])
    r = 0.4 * w
    u = np.array([[r, r - c], [r, r - c], [r - 1, r - 1 - c]])
    return StoppingPomdp(float(p), float(q), rows, u, 0.9)


@pytest.fixture(scope="module")
def stopping_instances():
    """Five instances with optimal value >= 1, so a 5% gap is meaningful."""
    rng = np.random.default_rng(7)
    out = []
    while len(out) < 5:
        P = random_stopping_pomdp(rng)
        sol = belief_grid_oracle(P, 40)
        if sol.values[0] >= 1.0:
            out.append((P, sol))
    return out


# ---------------------------------------------------------------------------


def test_c01_utility_decomposition(target64):
    cfg = target64
    rng = np.random.default_rng(1)
    with Budget(1.0) as b:
        for _ in range(1000):
            s = random_state(cfg, rng)
            a = rng.integers(cfg.n_defender_actions, size=cfg.n_nodes)
            states = {n: s.nodes[k] for n, k in cfg.graph.index.items()}
            acts = {n: int(a[k]) for n, k in cfg.graph.index.items()}
            split = 0.0
            for w in cfg.graph.workflows:
                split += workflow_utility(cfg, w, states, acts)
            assert stage_utility(s, a, cfg) == split
    b.check()


def exhaustive_posterior(b0, T, Z, history):
    """Bayes by summing over every hidden class path."""
    t = len(history)
    post = np.zeros(N_CLASSES)
    for path in itertools.product(range(N_CLASSES), repeat=t + 1):
        w = b0[path[0]]
        for k in range(t):
            w *= T[path[k], path[k + 1]] * Z[path[k + 1], history[k]]
        post[path[-1]] += w
    return post / post.sum()


def test_c02_filter_matches_exhaustive_bayes():
    rng = np.random.default_rng(2)
    Z = rng.dirichlet(np.ones(4), size=3)
    stage = STATIC_ATTACKER_TABLE
    pb, pe = 0.3, 0.4
    T = np.array([[0.8, 0.2, 0.0], [0.0, 1 - 0.15 * pb - 0.15 * pe, 0.15 * pb + 0.15 * pe], [0.0, 0.0, 1.0]])
    b0 = rng.dirichlet(np.ones(3))
    worst = 0.0
    with Budget(5.0) as b:
        for length in range(1, 6):
            for hist in itertools.product(range(4), repeat=length):
                bel = b0
                for o in hist:
                    bel = belief_update(bel, 0, o, stage, Z, pb, pe)
                worst = max(worst, float(np.abs(bel - exhaustive_posterior(b0, T, Z, hist)).max()))
    assert worst <= 1e-12
    b.check()


def test_c03_tp2_transition_grid():
    grid = np.round(np.arange(1, 10) / 10, 1)
    with Budget(1.0) as b:
        for p in grid:
            for q in grid:
                M = np.array([[1 - p, p, 0], [0, 1 - q, q], [0, 0, 1]])
                ok, minor = tp2_check(M)
                assert ok and minor is None
        ok, minor = tp2_check([[0.3, 0.7], [0.7, 0.3]])
    assert not ok
    assert minor.value < 0
    assert minor.value == pytest.approx(0.3 * 0.3 - 0.7 * 0.7)
    b.check()


def test_c04_zone_mdp(tiny2, target64):
    with Budget(1.0) as b:
        for cfg in (target64, tiny2[0]):
            for sub in subgames(cfg):
                hist = []
                solve_zone_mdp(build_zone_mdp(sub, cfg), tol=1e-8, history=hist)
                assert len(hist) <= 400 and hist[-1] <= 1e-8
        cfg = tiny2[0]
        assert cfg.gamma == 0.9 and cfg.n_zones == 2
        for sub in subgames(cfg):
            mdp = build_zone_mdp(sub, cfg)
            V, pol = solve_zone_mdp(mdp, tol=1e-12)
            V_enum, pol_enum = zone_mdp_enumeration(mdp)
            np.testing.assert_array_equal(pol, pol_enum)
            assert np.abs(V - V_enum).max() <= 1e-9
    b.check()


def test_c05_threshold_structure(stopping_instances):
    with Budget(120.0) as b:
        for P, sol in stopping_instances:
            assert P.n_obs == 10 and sol.resolution == 40
            assert tp2_check(P.continue_matrix)[0] and tp2_check(P.obs_rows)[0]
            assert count_reversals(mlr_line_patterns(sol)) == 0
    b.check()


def test_c06_spsa_quality(stopping_instances):
    gaps = []
    with Budget(300.0) as b:
        for n, (P, sol) in enumerate(stopping_instances, start=1):
            pol = spsa_fit_threshold(P, SpsaParams(), np.random.default_rng(n))
            v = float(evaluate_threshold(P, pol.theta, 10_000, np.random.default_rng(99)).mean())
            gaps.append((sol.values[0] - v) / abs(sol.values[0]))
    assert max(gaps) <= 0.05, gaps
    b.check()


def test_c07_optimal_substructure(tiny2):
    cfg, model = tiny2
    H = 5
    with Budget(120.0) as b:
        for att in (TableAttacker.static(), TableAttacker.pure(1, 3), TableAttacker.uniform()):
            locals_ = [att] * cfg.n_nodes
            policies = [node_best_response(cfg, model, k, att, H)[1] for k in range(cfg.n_nodes)]
            composite = composite_value(cfg, model, policies, locals_, H)
            optimum = global_best_response_value(cfg, model, locals_, H)
            assert abs(composite - optimum) <= 1e-9
    b.check()


# the embedded game: tiny2 with cheap access control and a strong exploit,
# which makes the attacker mix at equilibrium
TINY_GAME_OVERRIDES = {"access_control = 2": "access_control = 0.3", "p_exploit = 0.4": "p_exploit = 0.8"}


def _mixture(strategies, w, n_nodes):
    idx = np.flatnonzero(w > 1e-9)
    return AverageStrategy([CompositeStrategy([strategies[i]] * n_nodes) for i in idx], w[idx] / w[idx].sum())


def test_c08_exploitability_calibration(tiny2):
    from importlib import resources

    text = resources.files("irgame").joinpath("data/tiny2.cfg").read_text()
    for old, new in TINY_GAME_OVERRIDES.items():
        text = text.replace(old, new)
    cfg = parse_config(text)
    model = observation_model(cfg)
    H = 8
    with Budget(120.0) as b:
        A, Ds, As = tiny_game_payoff(TinyGame(cfg, model, H))
        v, x, y = brute_force_equilibrium(A)
        n = cfg.n_nodes
        br_D = CompositeStrategy([Ds[int(np.argmax(A @ y))]] * n)
        br_A = CompositeStrategy([As[int(np.argmin(x @ A))]] * n)
        profile = StrategyProfile(_mixture(Ds, x, n), _mixture(As, y, n))
        ex = exploitability(profile, br_D, br_A, 10_000, H, np.random.default_rng(0), cfg=cfg, model=model)
        assert abs(ex.delta) <= 2 * ex.se

        # always-null defender against its best-response attacker on the unmodified fixture
        cfg, model = tiny2
        settings = SolverSettings()
        null = constant_defender(cfg, 0)
        atk = best_response_attacker(cfg, model, null, settings, 0, 0)
        hat_D = best_response_defender(cfg, model, atk, settings, 0, 1)
        ex = exploitability(
            StrategyProfile(null, atk), hat_D, atk, 10_000, 88, np.random.default_rng(1), cfg=cfg, model=model
        )
        assert ex.delta > 3 * ex.se
    b.check()


def test_c09_dfsp_progress(tiny2):
    cfg, model = tiny2
    with Budget(600.0) as b:
        _, m1 = dfsp_run(cfg, SolverSettings(), delta=1e-9, max_iterations=20, seed=7, workers=1, model=model)
        _, m4 = dfsp_run(cfg, SolverSettings(), delta=1e-9, max_iterations=20, seed=7, workers=4, model=model)
    assert len(m1.records) == 20
    assert m1.records == m4.records
    assert m1.records[-1].delta_hat <= 0.5 * m1.records[0].delta_hat
    b.check()


def test_c10_attacker_learner(tiny2):
    cfg, model = tiny2
    with Budget(300.0) as b:
        # gradient check on a frozen batch, away from the behaviour weights so clipping is active
        rng = np.random.default_rng(10)
        k = 0
        behaviour = LinearSoftmaxPolicy(rng.normal(0, 0.5, (4, cfg.n_zones + 3)), cfg.n_zones)
        locals_ = [TableAttacker.static()] * cfg.n_nodes
        locals_[k] = behaviour
        roll = run_episodes(
            cfg, model, static_strategies("defender", cfg), CompositeStrategy(locals_), 32, 30, rng,
            nodes=[k], mode="local", record=True,
        ).steps
        r, i = roll["recon"][:, :, 0], roll["intrusion"][:, :, 0]
        batch = make_batch(
            behaviour, features(r, i, roll["bA"][:, :, 0]), r + i, roll["a_A"][:, :, 0], -roll["u"][:, :, 0], 0.9, 0.95
        )
        W = behaviour.weights + rng.normal(0, 0.3, behaviour.weights.shape)
        g = surrogate_grad(W, batch, 0.2, 1e-2)
        fd = np.zeros_like(W)
        h = 1e-6
        for idx in np.ndindex(W.shape):
            E = np.zeros_like(W)
            E[idx] = h
            fd[idx] = (surrogate(W + E, batch, 0.2, 1e-2) - surrogate(W - E, batch, 0.2, 1e-2)) / (2 * h)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-5

        # learned attacker against the static defender
        D = static_strategies("defender", cfg)
        atk = best_response_attacker(cfg, model, D, SolverSettings(ppo=PpoParams()), 10, 0)
        learned = -run_episodes(cfg, model, D, atk, 10_000, 88, np.random.default_rng(11)).returns
        uniform = -run_episodes(cfg, model, D, uniform_attacker(cfg), 10_000, 88, np.random.default_rng(12)).returns
        (m1, s1), (m2, s2) = mean_and_se(learned), mean_and_se(uniform)
        assert m1 - m2 >= 3 * np.hypot(s1, s2)
    b.check()


def test_c11_system_identification(tiny2, target64):
    cfg, model = tiny2
    with Budget(60.0) as b:
        records = generate_traces(model, cfg.graph.nodes, 100_000, np.random.default_rng(11))
        est = estimate_observation_model(records, cfg.obs_space_size, 0.0, cfg.graph.nodes)
        assert total_variation(est.rows, model.rows).max() <= 0.02
        for c in (tiny2[0], target64):
            fixture = EmpiricalObservationModel.from_model(observation_model(c), c.graph.nodes)
            for rep in validate_mlr(fixture).values():
                assert rep.fraction_nonnegative == 1.0
    b.check()


def test_c12_static_strategy_frequencies(target64):
    nz = target64.n_zones
    rng = np.random.default_rng(12)
    n = 100_000
    D = TableDefender.static(nz)
    acts = D.act(rng.integers(nz, size=n), None, None, rng.random(n))
    freq = np.bincount(acts, minlength=nz + 2) / n
    expected = np.r_[0.95, np.full(nz + 1, 0.05 / (nz + 1))]
    assert np.abs(freq - expected).max() <= 0.005

    A = TableAttacker.static()
    stated = {0: [0.8, 0.2, 0.0, 0.0], 1: [0.7, 0.0, 0.15, 0.15], 2: [1.0, 0.0, 0.0, 0.0]}
    for cls, row in stated.items():
        recon, intr = np.full(n, int(cls > 0)), np.full(n, int(cls == 2))
        acts = A.act(recon, intr, None, rng.random(n))
        freq = np.bincount(acts, minlength=4) / n
        assert np.abs(freq - row).max() <= 0.005


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
