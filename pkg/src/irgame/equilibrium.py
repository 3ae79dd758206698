"""Fictitious self-play over decomposed best responses, with exploitability estimates."""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from irgame.attacker import PpoParams, attacker_best_response
from irgame.decomposition import CompositeStrategy, subgames
from irgame.dynamics import ObservationModel, observation_model
from irgame.infrastructure import GameConfig
from irgame.simulation import run_episodes
from irgame.stopping import SpsaParams, defender_best_response, horizon_for
from irgame.strategies import StrategyProfile, static_strategies

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFENDER, ATTACKER = 0, 1
PURPOSE_BR, PURPOSE_EVAL, PURPOSE_INIT = 0, 1, 2


def task_rng(root: int, iteration: int, player: int, node: int, purpose: int) -> np.random.Generator:
    """Stream for one task, independent of scheduling and worker count."""
    return np.random.default_rng([root, iteration, player, node, purpose])


class AverageStrategy:
    """Mixture of composite strategies; one member is drawn per episode."""

    def __init__(self, history: Sequence, weights: Sequence[float] | None = None):
        if not history:
            raise ValueError("an average needs at least one strategy")
        self.history = list(history)
        w = np.full(len(history), 1.0 / len(history)) if weights is None else np.asarray(weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        self.weights = w

    def __len__(self) -> int:
        return len(self.history)

    def members(self) -> list[tuple[CompositeStrategy, float]]:
        out = []
        for s, w in zip(self.history, self.weights):
            out.extend((m, w * mw) for m, mw in s.members())
        return out

    def stage(self, k: int) -> np.ndarray:
        return sum(w * np.asarray(s.stage(k)) for s, w in zip(self.history, self.weights))

    def zone_stage(self, k: int, n_zones: int) -> np.ndarray:
        return sum(w * np.asarray(s.zone_stage(k, n_zones)) for s, w in zip(self.history, self.weights))

    def extend(self, strategy) -> AverageStrategy:
        return average_strategy(self.history + [strategy])

    def to_dict(self) -> dict:
        return {
            "type": "average",
            "weights": [float(w) for w in self.weights],
            "members": [s.to_dict() for s in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> AverageStrategy:
        return cls([strategy_from_dict(m) for m in d["members"]], d["weights"])


def average_strategy(history: Sequence) -> AverageStrategy:
    return AverageStrategy(history)


def strategy_from_dict(d: dict):
    if d["type"] == "composite":
        return CompositeStrategy.from_dict(d)
    if d["type"] == "average":
        return AverageStrategy.from_dict(d)
    raise ValueError(f"unknown strategy type {d['type']!r}")


def save_strategy(strategy, path: str | Path, kind: str) -> None:
    doc = {"schema": SCHEMA_VERSION, "kind": kind, "strategy": strategy.to_dict()}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_strategy(path: str | Path):
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported strategy schema {doc.get('schema')!r}")
    return strategy_from_dict(doc["strategy"])


# --------------------------------------------------------------------------- best responses


@dataclass(frozen=True)
class SolverSettings:
    spsa: SpsaParams = SpsaParams(episodes=100, eval_episodes=400)
    ppo: PpoParams = PpoParams()
    eval_episodes: int = 2000
    horizon: int | None = None


def _defender_task(args):
    cfg, model, stage, k, spsa, seed = args
    sub = subgames(cfg)[k]
    return defender_best_response(sub, stage, model, cfg, spsa, np.random.default_rng(seed))


def _attacker_task(args):
    cfg, model, defender, k, ppo, seed = args
    sub = subgames(cfg)[k]
    return attacker_best_response(defender, sub, cfg, model, ppo, np.random.default_rng(seed))


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def best_response_defender(
    cfg: GameConfig, model: ObservationModel, attacker, settings: SolverSettings, root: int, iteration: int,
    workers: int = 1, purpose: int = PURPOSE_BR,
) -> CompositeStrategy:
    """Composite of node best responses against the attacker's published stage strategies."""
    tasks = [
        (cfg, model, attacker.stage(k), k, settings.spsa, [root, iteration, DEFENDER, k, purpose])
        for k in range(cfg.n_nodes)
    ]
    return CompositeStrategy(_map(_defender_task, tasks, workers), cfg)


def best_response_attacker(
    cfg: GameConfig, model: ObservationModel, defender, settings: SolverSettings, root: int, iteration: int,
    workers: int = 1, purpose: int = PURPOSE_BR,
) -> CompositeStrategy:
    ppo = settings.ppo if settings.horizon is None else PpoParams(**{**asdict(settings.ppo), "horizon": settings.horizon})
    tasks = [
        (cfg, model, defender, k, ppo, [root, iteration, ATTACKER, k, purpose]) for k in range(cfg.n_nodes)
    ]
    return CompositeStrategy(_map(_attacker_task, tasks, workers), cfg)


# --------------------------------------------------------------------------- exploitability


@dataclass(frozen=True)
class Exploitability:
    delta: float
    se: float
    v_def: float
    v_atk: float


def exploitability(
    profile: StrategyProfile,
    br_defender,
    br_attacker,
    episodes: int,
    T: int,
    rng: np.random.Generator,
    *,
    cfg: GameConfig,
    model: ObservationModel,
) -> Exploitability:
    """Defender return of its best response minus defender return against the attacker's best response.

    Both terms run on the same random stream. ``v_def`` and ``v_atk`` are the
    two defender-perspective means.
    """
    if episodes < 2:
        raise ValueError("need at least two episodes")
    seed = int(rng.integers(2**63))
    j1 = run_episodes(cfg, model, br_defender, profile.attacker, episodes, T, np.random.default_rng(seed)).returns
    j2 = run_episodes(cfg, model, profile.defender, br_attacker, episodes, T, np.random.default_rng(seed)).returns
    delta = float(j1.mean() - j2.mean())
    se = float(np.sqrt(j1.var(ddof=1) / episodes + j2.var(ddof=1) / episodes))
    return Exploitability(delta, se, float(j1.mean()), float(j2.mean()))


# --------------------------------------------------------------------------- DFSP


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    delta_hat: float
    delta_se: float
    v_def: float
    v_atk: float
    seconds: float = field(default=0.0, compare=False)


@dataclass
class EquilibriumMetrics:
    records: list[MetricsRecord] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        """Deterministic columns only; wall-clock goes to :meth:`write_timing`."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "delta_hat", "delta_se", "v_def", "v_atk"])
            for r in self.records:
                w.writerow([r.iteration, repr(r.delta_hat), repr(r.delta_se), repr(r.v_def), repr(r.v_atk)])

    def write_timing(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "seconds"])
            for r in self.records:
                w.writerow([r.iteration, f"{r.seconds:.3f}"])


def dfsp_run(
    cfg: GameConfig,
    settings: SolverSettings = SolverSettings(),
    delta: float = 0.2,
    max_iterations: int = 100,
    seed: int = 0,
    workers: int = 1,
    model: ObservationModel | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[StrategyProfile, EquilibriumMetrics]:
    """Alternate best responses against the opponents' averages until exploitability drops below ``delta``.

    The best responses computed for the exploitability estimate at the end of
    an iteration answer exactly the averages the next iteration starts from,
    so they are reused as that iteration's new strategies.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    model = model if model is not None else observation_model(cfg)
    T = settings.horizon or horizon_for(cfg.gamma)
    D = average_strategy([static_strategies("defender", cfg)])
    A = average_strategy([static_strategies("attacker", cfg)])
    metrics = EquilibriumMetrics()
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    index = []
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    hat_D = hat_A = None
    for it in range(1, max_iterations + 1):
        t0 = time.perf_counter()
        if hat_D is None:
            new_D = best_response_defender(cfg, model, A, settings, seed, it, workers, PURPOSE_INIT)
            new_A = best_response_attacker(cfg, model, D, settings, seed, it, workers, PURPOSE_INIT)
        else:
            new_D, new_A = hat_D, hat_A
        D, A = D.extend(new_D), A.extend(new_A)
        hat_D = best_response_defender(cfg, model, A, settings, seed, it, workers)
        hat_A = best_response_attacker(cfg, model, D, settings, seed, it, workers)
        ex = exploitability(
            StrategyProfile(D, A, it), hat_D, hat_A, settings.eval_episodes, T,
            task_rng(seed, it, 2, 0, PURPOSE_EVAL), cfg=cfg, model=model,
        )
        rec = MetricsRecord(it, ex.delta, ex.se, ex.v_def, ex.v_atk, time.perf_counter() - t0)
        metrics.records.append(rec)
        log.info("iteration %d: delta_hat=%.4f se=%.4f", it, ex.delta, ex.se)
        if ckpt is not None:
            save_strategy(new_D, ckpt / f"defender_{it:03d}.json", "defender")
            save_strategy(new_A, ckpt / f"attacker_{it:03d}.json", "attacker")
            index.append({"iteration": it, "defender": f"defender_{it:03d}.json", "attacker": f"attacker_{it:03d}.json"})
        if ex.delta < delta:
            break
    profile = StrategyProfile(D, A, len(metrics.records))
    if ckpt is not None:
        (ckpt / "index.json").write_text(
            json.dumps({"schema": SCHEMA_VERSION, "initial": "static", "iterations": index}, indent=1) + "\n"
        )
        save_strategy(D, ckpt / "defender_average.json", "defender")
        save_strategy(A, ckpt / "attacker_average.json", "attacker")
    return profile, metrics
