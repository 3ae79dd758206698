"""Node-local strategies and the sampling helpers shared by all of them.

A defender local strategy implements::

    act(zone, belief, obs, u) -> action codes       # vectorized over episodes
    zone_stage(n_zones) -> (n_zones, n_actions)     # published stage strategy

and an attacker local strategy implements::

    act(recon, intrusion, zone_belief, u) -> action codes
    stage() -> (3, 4)                               # published stage strategy

``u`` holds one uniform draw per episode; every strategy turns it into an
action through the inverse CDF so that the engine's random stream does not
depend on which strategies are plugged in.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np

from irgame.dynamics import LEGAL_MASK, N_ATTACKER_ACTIONS

NULL_STOP_MASS = 0.95

# initial attacker case table, rows indexed by attacker-state class
STATIC_ATTACKER_TABLE = np.array(
    [
        [0.8, 0.2, 0.0, 0.0],
        [0.7, 0.0, 0.15, 0.15],
        [1.0, 0.0, 0.0, 0.0],
    ]
)


class DefenderLocal(Protocol):
    def act(self, zone: np.ndarray, belief: np.ndarray, obs: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def zone_stage(self, n_zones: int) -> np.ndarray: ...

    def to_dict(self) -> dict[str, Any]: ...


class AttackerLocal(Protocol):
    def act(self, recon: np.ndarray, intrusion: np.ndarray, zone_belief: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def stage(self) -> np.ndarray: ...

    def to_dict(self) -> dict[str, Any]: ...


def sample_codes(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling, one row of ``probs`` per entry of ``u``.

    Zero-probability entries are never returned, even under rounding.
    """
    probs = np.atleast_2d(probs)
    cum = np.cumsum(probs, axis=1)
    idx = (cum <= u[:, None]).sum(axis=1)
    # u above a total that rounded below 1 falls back to the last supported entry
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last)


def static_defender_row(n_zones: int) -> np.ndarray:
    n_act = n_zones + 2
    row = np.full(n_act, (1.0 - NULL_STOP_MASS) / (n_act - 1))
    row[0] = NULL_STOP_MASS
    return row


# --------------------------------------------------------------------------- defenders


@dataclass(frozen=True)
class TableDefender:
    """Belief-independent defender: ``table[zone]`` is a distribution over action codes."""

    table: tuple[tuple[float, ...], ...]

    def act(self, zone, belief, obs, u):
        return sample_codes(np.asarray(self.table)[zone], u)

    @classmethod
    def stacked(cls, members, pos):
        tables = np.array([m.table for m in members], dtype=float)[pos]
        return lambda zone, belief, obs, u: sample_codes(tables[np.arange(len(zone)), zone], u)

    def zone_stage(self, n_zones: int) -> np.ndarray:
        return np.asarray(self.table, dtype=float)

    def to_dict(self):
        return {"type": "table_defender", "table": [list(r) for r in self.table]}

    @classmethod
    def static(cls, n_zones: int) -> TableDefender:
        row = tuple(static_defender_row(n_zones))
        return cls(tuple(row for _ in range(n_zones)))

    @classmethod
    def constant(cls, code: int, n_zones: int) -> TableDefender:
        row = [0.0] * (n_zones + 2)
        row[code] = 1.0
        return cls(tuple(tuple(row) for _ in range(n_zones)))


@dataclass(frozen=True)
class ObservationRuleDefender:
    """Deterministic rule on the last observation: ``rule[0]`` at the first step, ``rule[1 + o]`` after ``o``.

    The published zone stage assumes each rule entry is equally likely.
    """

    rule: tuple[int, ...]

    def act(self, zone, belief, obs, u):
        return np.asarray(self.rule)[np.asarray(obs) + 1]

    def zone_stage(self, n_zones: int) -> np.ndarray:
        row = np.zeros(n_zones + 2)
        for a in self.rule:
            row[a] += 1.0 / len(self.rule)
        return np.repeat(row[None], n_zones, axis=0)

    def to_dict(self):
        return {"type": "obs_rule_defender", "rule": list(self.rule)}


# --------------------------------------------------------------------------- attackers


@dataclass(frozen=True)
class TableAttacker:
    """Class-stationary attacker: ``table[class]`` is a distribution over attacker actions."""

    table: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        if t.shape != (3, N_ATTACKER_ACTIONS) or np.any(t[~LEGAL_MASK] != 0):
            raise ValueError("attacker table must be 3x4 and put no mass on illegal actions")
        if np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("attacker table rows must sum to 1")

    def act(self, recon, intrusion, zone_belief, u):
        return sample_codes(np.asarray(self.table)[recon + intrusion], u)

    @classmethod
    def stacked(cls, members, pos):
        tables = np.array([m.table for m in members], dtype=float)[pos]
        return lambda recon, intrusion, zone_belief, u: sample_codes(
            tables[np.arange(len(recon)), recon + intrusion], u
        )

    def stage(self) -> np.ndarray:
        return np.asarray(self.table, dtype=float)

    def to_dict(self):
        return {"type": "table_attacker", "table": [list(r) for r in self.table]}

    @classmethod
    def static(cls) -> TableAttacker:
        return cls(tuple(map(tuple, STATIC_ATTACKER_TABLE)))

    @classmethod
    def uniform(cls) -> TableAttacker:
        t = LEGAL_MASK / LEGAL_MASK.sum(axis=1, keepdims=True)
        return cls(tuple(map(tuple, t)))

    @classmethod
    def pure(cls, healthy: int, discovered: int) -> TableAttacker:
        t = np.zeros((3, N_ATTACKER_ACTIONS))
        t[0, healthy] = t[1, discovered] = t[2, 0] = 1.0
        return cls(tuple(map(tuple, t)))


def local_from_dict(d: dict[str, Any]):
    kind = d["type"]
    if kind == "table_defender":
        return TableDefender(tuple(tuple(r) for r in d["table"]))
    if kind == "obs_rule_defender":
        return ObservationRuleDefender(tuple(d["rule"]))
    if kind == "table_attacker":
        return TableAttacker(tuple(tuple(r) for r in d["table"]))
    if kind == "threshold_defender":
        from irgame.stopping import ThresholdStrategy

        return ThresholdStrategy.from_dict(d)
    if kind == "linear_softmax_attacker":
        from irgame.attacker import LinearSoftmaxPolicy

        return LinearSoftmaxPolicy.from_dict(d)
    raise ValueError(f"unknown strategy type {kind!r}")


def static_strategies(kind: str, cfg):
    """The fixed initial strategies: the defender's mostly-null mix or the attacker's case table."""
    from irgame.decomposition import CompositeStrategy

    if kind == "defender":
        local = TableDefender.static(cfg.n_zones)
    elif kind == "attacker":
        local = TableAttacker.static()
    else:
        raise ValueError(f"kind must be 'defender' or 'attacker', not {kind!r}")
    return CompositeStrategy([local] * cfg.n_nodes, cfg)


def uniform_attacker(cfg):
    from irgame.decomposition import CompositeStrategy

    return CompositeStrategy([TableAttacker.uniform()] * cfg.n_nodes, cfg)


def constant_defender(cfg, code: int = 0):
    from irgame.decomposition import CompositeStrategy

    return CompositeStrategy([TableDefender.constant(code, cfg.n_zones)] * cfg.n_nodes, cfg)


@dataclass
class StrategyProfile:
    defender: Any
    attacker: Any
    iteration: int = 0
