"""Workflow and node subgames, node-local utilities and composite strategies."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from irgame.dynamics import DefenderAction, NodeState
from irgame.infrastructure import GameConfig


@dataclass(frozen=True)
class NodeSubgame:
    node: int
    index: int
    workflow: str
    ancestor_weight: int
    n_zones: int
    n_obs: int

    @property
    def n_classes(self) -> int:
        return 3

    @property
    def defender_actions(self) -> tuple[int, ...]:
        return tuple(range(self.n_zones + 2))

    @property
    def attacker_actions(self) -> tuple[int, ...]:
        return (0, 1, 2, 3)


def decompose(cfg: GameConfig) -> dict[str, list[NodeSubgame]]:
    """One node subgame per node, grouped by workflow in declaration order."""
    g = cfg.graph
    groups: dict[str, list[NodeSubgame]] = {}
    for w, members in g.workflows.items():
        groups[w] = [
            NodeSubgame(
                node=n,
                index=g.index[n],
                workflow=w,
                ancestor_weight=len(g.ancestors_of_index(g.index[n])),
                n_zones=cfg.n_zones,
                n_obs=cfg.obs_space_size,
            )
            for n in members
        ]
    return groups


def subgames(cfg: GameConfig) -> list[NodeSubgame]:
    """Flat list of node subgames in node order."""
    flat = [s for group in decompose(cfg).values() for s in group]
    return sorted(flat, key=lambda s: s.index)


def local_stage_utility(sub: NodeSubgame, s_i: NodeState | int, a_D: int | DefenderAction, cfg: GameConfig) -> float:
    """Node-local utility with the node's activity taken after the defender acts."""
    if isinstance(a_D, DefenderAction):
        a_D = a_D.code(cfg.n_zones)
    if isinstance(s_i, NodeState):
        zone, intrusion = s_i.zone, s_i.intrusion
    else:
        zone, intrusion = None, int(s_i == 2)
    if 1 <= a_D <= cfg.n_zones:
        zone = a_D - 1
    if zone is None:
        raise ValueError("a state class needs a zone-moving action to fix the activity")
    alpha = float(cfg.zone_active[zone])
    return cfg.eta * cfg.utility_scale * sub.ancestor_weight * alpha - (intrusion + cfg.cost_vector[a_D])


def local_utility_table(sub: NodeSubgame, cfg: GameConfig) -> np.ndarray:
    """``table[zone, class, action]`` of :func:`local_stage_utility`."""
    nz, na = cfg.n_zones, cfg.n_defender_actions
    out = np.empty((nz, 3, na))
    for z in range(nz):
        for c in range(3):
            state = NodeState(z, int(c > 0), int(c == 2), int(cfg.zone_active[z]))
            for a in range(na):
                out[z, c, a] = local_stage_utility(sub, state, a, cfg)
    return out


class CompositeStrategy:
    """Concatenation of node-local strategies, one per node in node order."""

    def __init__(self, locals_: Sequence, cfg: GameConfig | None = None):
        if cfg is not None and len(locals_) != cfg.n_nodes:
            raise ValueError(f"expected {cfg.n_nodes} local strategies, got {len(locals_)}")
        self.locals = tuple(locals_)

    def __len__(self) -> int:
        return len(self.locals)

    def local(self, k: int):
        return self.locals[k]

    def members(self) -> list[tuple[CompositeStrategy, float]]:
        return [(self, 1.0)]

    def stage(self, k: int) -> np.ndarray:
        return self.locals[k].stage()

    def zone_stage(self, k: int, n_zones: int) -> np.ndarray:
        return self.locals[k].zone_stage(n_zones)

    def replace(self, k: int, local) -> CompositeStrategy:
        new = list(self.locals)
        new[k] = local
        return CompositeStrategy(new)

    def defender_action(self, zones, beliefs, obs, u=None) -> np.ndarray:
        """Global defender action for one state: the concatenation of local actions."""
        u = np.zeros(len(self.locals)) if u is None else u
        return np.array(
            [
                int(s.act(np.array([zones[k]]), np.asarray(beliefs[k])[None], np.array([obs[k]]), u[k : k + 1])[0])
                for k, s in enumerate(self.locals)
            ]
        )

    def to_dict(self) -> dict:
        return {"type": "composite", "locals": [s.to_dict() for s in self.locals]}

    @classmethod
    def from_dict(cls, d: dict) -> CompositeStrategy:
        from irgame.strategies import local_from_dict

        return cls([local_from_dict(x) for x in d["locals"]])


def composite_strategy(locals_: Sequence, cfg: GameConfig) -> CompositeStrategy:
    return CompositeStrategy(locals_, cfg)


def write_inventory(cfg: GameConfig, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "workflow", "ancestor_weight"])
        for s in subgames(cfg):
            w.writerow([s.node, s.workflow, s.ancestor_weight])
