import json

import numpy as np
import pytest

from irgame.attacker import PpoParams
from irgame.dynamics import observation_model
from irgame.equilibrium import (
    AverageStrategy,
    SolverSettings,
    average_strategy,
    dfsp_run,
    exploitability,
    load_strategy,
    save_strategy,
    task_rng,
)
from irgame.infrastructure import load_config
from irgame.simulation import run_episodes
from irgame.stopping import SpsaParams
from irgame.strategies import StrategyProfile, constant_defender, static_strategies

SMALL = SolverSettings(
    spsa=SpsaParams(N=3, episodes=20, eval_episodes=50, horizon=20),
    ppo=PpoParams(iterations=2, batch_episodes=8, eval_episodes=20, horizon=20),
    eval_episodes=100,
    horizon=20,
)


@pytest.fixture(scope="module")
def tiny():
    cfg = load_config("tiny2.cfg")
    return cfg, observation_model(cfg)


def test_task_rng_is_pure():
    a = task_rng(1, 2, 0, 1, 0).random(5)
    assert np.array_equal(a, task_rng(1, 2, 0, 1, 0).random(5))
    assert not np.array_equal(a, task_rng(1, 2, 0, 2, 0).random(5))


def test_exploitability_is_zero_when_best_responses_are_the_profile(tiny):
    cfg, model = tiny
    D, A = static_strategies("defender", cfg), static_strategies("attacker", cfg)
    ex = exploitability(StrategyProfile(D, A), D, A, 500, 30, np.random.default_rng(0), cfg=cfg, model=model)
    assert ex.delta == 0.0
    assert ex.v_def == ex.v_atk


def test_exploitability_needs_two_episodes(tiny):
    cfg, model = tiny
    D, A = static_strategies("defender", cfg), static_strategies("attacker", cfg)
    with pytest.raises(ValueError):
        exploitability(StrategyProfile(D, A), D, A, 1, 10, np.random.default_rng(0), cfg=cfg, model=model)


def test_single_strategy_average(tiny):
    cfg, _ = tiny
    s = static_strategies("defender", cfg)
    avg = average_strategy([s])
    assert len(avg) == 1 and avg.weights.tolist() == [1.0]
    np.testing.assert_array_equal(avg.zone_stage(0, cfg.n_zones), s.zone_stage(0, cfg.n_zones))


def test_two_member_average_draws_each_half_the_time(tiny):
    cfg, model = tiny
    null, ac = constant_defender(cfg, 0), constant_defender(cfg, cfg.n_defender_actions - 1)
    avg = average_strategy([null, ac])
    batch = run_episodes(
        cfg, model, avg, static_strategies("attacker", cfg), 10_000, 1, np.random.default_rng(3), record=True
    )
    first = batch.steps["a_D"][0, :, 0]
    assert abs((first == 0).mean() - 0.5) <= 0.02
    assert set(np.unique(first)) == {0, cfg.n_defender_actions - 1}


@pytest.mark.parametrize("weights", [[0.7, 0.7], [1.5, -0.5]])
def test_average_weight_validation(tiny, weights):
    cfg, _ = tiny
    s = static_strategies("defender", cfg)
    with pytest.raises(ValueError):
        AverageStrategy([s, s], weights)
    with pytest.raises(ValueError):
        AverageStrategy([])


def test_save_load_round_trip(tiny, tmp_path):
    cfg, _ = tiny
    avg = average_strategy([static_strategies("attacker", cfg), static_strategies("attacker", cfg)])
    save_strategy(avg, tmp_path / "a.json", "attacker")
    back = load_strategy(tmp_path / "a.json")
    assert back.to_dict() == avg.to_dict()
    doc = json.loads((tmp_path / "a.json").read_text())
    doc["schema"] = 99
    (tmp_path / "b.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="schema"):
        load_strategy(tmp_path / "b.json")


@pytest.fixture(scope="module")
def one_iteration(tiny, tmp_path_factory):
    cfg, model = tiny
    out = tmp_path_factory.mktemp("dfsp")
    profile, metrics = dfsp_run(cfg, SMALL, delta=1e-9, max_iterations=1, seed=5, model=model, checkpoint_dir=out)
    return profile, metrics, out


def test_one_iteration_profile(one_iteration):
    profile, metrics, out = one_iteration
    assert [r.iteration for r in metrics.records] == [1]
    # static start plus one best response per side
    assert len(profile.defender) == 2 and len(profile.attacker) == 2
    index = json.loads((out / "index.json").read_text())
    assert [e["iteration"] for e in index["iterations"]] == [1]
    for name in ("defender_001.json", "attacker_001.json", "defender_average.json", "attacker_average.json"):
        assert (out / name).is_file()


def test_dfsp_records_do_not_depend_on_workers(tiny, one_iteration):
    cfg, model = tiny
    _, metrics, _ = one_iteration
    _, again = dfsp_run(cfg, SMALL, delta=1e-9, max_iterations=1, seed=5, workers=2, model=model)
    assert again.records == metrics.records


def test_metrics_csv_is_reproducible(tiny, one_iteration, tmp_path):
    cfg, model = tiny
    _, metrics, _ = one_iteration
    _, again = dfsp_run(cfg, SMALL, delta=1e-9, max_iterations=1, seed=5, model=model)
    metrics.write_csv(tmp_path / "a.csv")
    again.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "iteration,delta_hat,delta_se,v_def,v_atk"


def test_dfsp_rejects_nonpositive_delta(tiny):
    cfg, _ = tiny
    with pytest.raises(ValueError):
        dfsp_run(cfg, SMALL, delta=0.0)
