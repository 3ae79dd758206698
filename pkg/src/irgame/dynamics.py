"""Game engine primitives: node states, actions, transitions, utility, observations, beliefs.

Action encodings used throughout the package (vectorized code works on these ints):

* defender local action: ``0`` null, ``1 + z`` move to zone ``z``, ``|Z| + 1`` access control
* attacker local action: ``0`` null, ``1`` reconnaissance, ``2`` brute force, ``3`` exploit
* attacker-state class: ``0`` healthy ``(0,0)``, ``1`` discovered ``(1,0)``, ``2`` compromised ``(1,1)``
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import stats

from irgame.infrastructure import GameConfig

HEALTHY, DISCOVERED, COMPROMISED = 0, 1, 2
N_CLASSES = 3
N_ATTACKER_ACTIONS = 4
E1 = (1.0, 0.0, 0.0)


class FilterDegenerate(ArithmeticError):
    """The observation has zero probability under every state of the filter."""


class IllegalAction(ValueError):
    pass


class AttackerAction(enum.IntEnum):
    NULL = 0
    RECON = 1
    BRUTE_FORCE = 2
    EXPLOIT = 3


@dataclass(frozen=True)
class DefenderAction:
    """A defender local action: null, a move to a zone, or access control."""

    kind: str = "null"
    zone: int | None = None

    @classmethod
    def null(cls) -> DefenderAction:
        return cls("null")

    @classmethod
    def move(cls, zone: int) -> DefenderAction:
        return cls("move", zone)

    @classmethod
    def access_control(cls) -> DefenderAction:
        return cls("access_control")

    def code(self, n_zones: int) -> int:
        if self.kind == "null":
            return 0
        if self.kind == "move":
            if self.zone is None or not 0 <= self.zone < n_zones:
                raise IllegalAction(f"unknown zone target {self.zone}")
            return 1 + self.zone
        return n_zones + 1

    @classmethod
    def from_code(cls, code: int, n_zones: int) -> DefenderAction:
        if code == 0:
            return cls.null()
        if 1 <= code <= n_zones:
            return cls.move(code - 1)
        if code == n_zones + 1:
            return cls.access_control()
        raise IllegalAction(f"invalid defender action code {code}")

    def __str__(self) -> str:
        if self.kind == "move":
            return f"zone:{self.zone}"
        return self.kind


@dataclass(frozen=True)
class NodeState:
    zone: int
    recon: int = 0
    intrusion: int = 0
    active: int = 1

    def __post_init__(self):
        if self.intrusion and not self.recon:
            raise ValueError("a node can only be compromised after it is discovered")

    @property
    def state_class(self) -> int:
        return self.recon + self.intrusion


@dataclass(frozen=True)
class GlobalState:
    nodes: tuple[NodeState, ...]

    @property
    def defender_view(self) -> tuple[int, ...]:
        return tuple(s.zone for s in self.nodes)

    @property
    def attacker_view(self) -> tuple[tuple[int, int], ...]:
        return tuple((s.recon, s.intrusion) for s in self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, k: int) -> NodeState:
        return self.nodes[k]


def initial_state(cfg: GameConfig) -> GlobalState:
    return GlobalState(
        tuple(NodeState(z, 0, 0, int(cfg.zone_active[z])) for z in cfg.initial_zones)
    )


def state_class(recon, intrusion):
    return recon + intrusion


def legal_attacker_actions(s: GlobalState | NodeState, i: int | None = None) -> frozenset[int]:
    """Attacker actions with an effect on node ``i``.

    On a compromised node every action is accepted by :func:`attacker_step` but
    only the null action is effective, so only that one is reported.
    """
    node = s if isinstance(s, NodeState) else s.nodes[i]
    if node.intrusion:
        return frozenset({AttackerAction.NULL})
    if node.recon:
        return frozenset(AttackerAction)
    return frozenset({AttackerAction.NULL, AttackerAction.RECON})


LEGAL_MASK = np.array(
    [
        [True, True, False, False],
        [True, True, True, True],
        [True, False, False, False],
    ]
)


def attacker_step(
    s_i: NodeState,
    a_A: int,
    a_D: int,
    rng: np.random.Generator,
    p_brute: float = 0.3,
    p_exploit: float = 0.4,
) -> NodeState:
    """Sample the next reconnaissance and intrusion bits of one node."""
    a_A = AttackerAction(a_A)
    if a_A in (AttackerAction.BRUTE_FORCE, AttackerAction.EXPLOIT) and not s_i.recon:
        raise IllegalAction(f"{a_A.name} on an undiscovered node")
    if a_D != 0:
        return replace(s_i, recon=0, intrusion=0)
    if s_i.intrusion or a_A == AttackerAction.NULL:
        return s_i
    if a_A == AttackerAction.RECON:
        return replace(s_i, recon=1)
    p = p_brute if a_A == AttackerAction.BRUTE_FORCE else p_exploit
    if rng.random() < p:
        return replace(s_i, intrusion=1)
    return s_i


def attacker_transition_probs(cls: int, a_A: int, a_D: int, p_brute: float, p_exploit: float) -> np.ndarray:
    """Distribution of the next attacker-state class (length 3)."""
    out = np.zeros(N_CLASSES)
    if a_D != 0:
        out[HEALTHY] = 1.0
        return out
    if cls == COMPROMISED or a_A == AttackerAction.NULL:
        out[cls] = 1.0
    elif a_A == AttackerAction.RECON:
        out[max(cls, DISCOVERED)] = 1.0
    else:
        if cls == HEALTHY:
            raise IllegalAction("attack on an undiscovered node")
        p = p_brute if a_A == AttackerAction.BRUTE_FORCE else p_exploit
        out[COMPROMISED] = p
        out[DISCOVERED] = 1.0 - p
    return out


def defender_step(s_i: NodeState, a_D: int, cfg: GameConfig) -> NodeState:
    """Apply a defender local action to the zone of one node."""
    action = DefenderAction.from_code(a_D, cfg.n_zones)
    zone = action.zone if action.kind == "move" else s_i.zone
    return replace(s_i, zone=zone, active=int(cfg.zone_active[zone]))


def next_zone(zone, a_D, n_zones: int):
    """Vectorized zone transition on action codes."""
    a_D = np.asarray(a_D)
    moving = (a_D >= 1) & (a_D <= n_zones)
    return np.where(moving, a_D - 1, zone)


def _node_term(cfg: GameConfig, reachable: bool, intrusion: int, a_D: int) -> float:
    return cfg.eta * cfg.utility_scale * float(reachable) - (float(intrusion) + cfg.cost_vector[a_D])


def reachability(s: GlobalState, cfg: GameConfig) -> list[bool]:
    """``[gw -> i]``: node ``i`` and all of its ancestors are active."""
    parent = cfg.graph.parent_index
    reach = [False] * len(s.nodes)
    for k in cfg.graph.topological_order:
        up = True if parent[k] == -1 else reach[parent[k]]
        reach[k] = up and bool(s.nodes[k].active)
    return reach


def stage_utility(s: GlobalState, a_D: Sequence[int], cfg: GameConfig) -> float:
    """Defender utility of one stage, summed workflow by workflow."""
    reach = reachability(s, cfg)
    index = cfg.graph.index
    total = 0.0
    for members in cfg.graph.workflows.values():
        w_total = 0.0
        for n in members:
            k = index[n]
            w_total += _node_term(cfg, reach[k], s.nodes[k].intrusion, a_D[k])
        total += w_total
    return total


def workflow_utility(
    cfg: GameConfig, workflow: str, states: dict[int, NodeState], actions: dict[int, int]
) -> float:
    """Utility of a single workflow from the states and actions of its own nodes."""
    members = cfg.graph.workflows[workflow]
    reach: dict[int, bool] = {}

    def reachable(n) -> bool:
        if n not in reach:
            p = cfg.graph.parent[n]
            up = True if p == cfg.graph.gateway else reachable(p)
            reach[n] = up and bool(states[n].active)
        return reach[n]

    w_total = 0.0
    for n in members:
        w_total += _node_term(cfg, reachable(n), states[n].intrusion, actions[n])
    return w_total


# --------------------------------------------------------------------------- observations


@dataclass(frozen=True)
class ObservationModel:
    """Per-node observation rows ``rows[node, class, o]``."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 3 or rows.shape[1] != N_CLASSES:
            raise ValueError("rows must have shape (nodes, 3, observations)")
        if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=2) - 1.0) > 1e-12):
            raise ValueError("observation rows must be probability distributions")
        object.__setattr__(self, "rows", rows)
        cdf = np.cumsum(rows, axis=2)
        cdf[..., -1] = 1.0
        object.__setattr__(self, "_cdf", cdf)

    @property
    def n_obs(self) -> int:
        return self.rows.shape[2]

    @property
    def n_nodes(self) -> int:
        return self.rows.shape[0]

    def mean(self, node: int, cls: int) -> float:
        return float(self.rows[node, cls] @ np.arange(self.n_obs))

    def sample(self, node: int, cls: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF draws for one node; ``cls`` and ``u`` are equally shaped."""
        out = np.empty(np.shape(u), dtype=np.int64)
        for c in range(N_CLASSES):
            sel = cls == c
            if np.any(sel):
                out[sel] = np.searchsorted(self._cdf[node, c], u[sel], side="right")
        return np.minimum(out, self.n_obs - 1)


def negbin_rows(n_obs: int, shape: float, means: Sequence[float]) -> np.ndarray:
    """Negative-binomial count rows truncated to ``{0, ..., n_obs-1}``.

    With a common shape parameter the likelihood ratio between two rows is
    ``(m2 (r+m1) / (m1 (r+m2)))**o`` up to a constant, so rows with increasing
    means are ordered by monotone likelihood ratio.
    """
    support = np.arange(n_obs)
    rows = []
    for m in means:
        p = shape / (shape + m)
        pmf = stats.nbinom.pmf(support, shape, p)
        rows.append(pmf / pmf.sum())
    return np.array(rows)


def observation_model(cfg: GameConfig) -> ObservationModel:
    spec = cfg.obs_model_spec
    if spec.kind == "empirical":
        from irgame.sysid import load_model_csv

        rows = load_model_csv(spec.path, cfg)
        return ObservationModel(rows)
    rows = negbin_rows(cfg.obs_space_size, spec.shape, spec.means)
    return ObservationModel(np.repeat(rows[None], cfg.n_nodes, axis=0))


def sample_observation(s: GlobalState, model: ObservationModel, rng: np.random.Generator) -> np.ndarray:
    """Draw one observation per node, independently given each node's class."""
    u = rng.random(len(s.nodes))
    return np.array(
        [model.sample(k, np.array([node.state_class]), u[k : k + 1])[0] for k, node in enumerate(s.nodes)]
    )


# --------------------------------------------------------------------------- belief filter


def continue_matrix(stage: np.ndarray, p_brute: float, p_exploit: float) -> np.ndarray:
    """Class transition matrix under the defender's null action.

    ``stage[c, a]`` is the attacker's stage strategy at this node.
    """
    stage = np.asarray(stage, dtype=float)
    T = np.zeros((N_CLASSES, N_CLASSES))
    for c in range(N_CLASSES):
        for a in range(N_ATTACKER_ACTIONS):
            if stage[c, a] == 0.0:
                continue
            T[c] += stage[c, a] * attacker_transition_probs(c, a, 0, p_brute, p_exploit)
    return T


def belief_update(
    b: Sequence[float],
    a_D: int,
    o: int,
    stage: np.ndarray,
    obs_rows: np.ndarray,
    p_brute: float = 0.3,
    p_exploit: float = 0.4,
) -> np.ndarray:
    """One step of the defender's node-local Bayes filter.

    ``obs_rows[c, o]`` is the observation distribution of class ``c``. Any
    non-null defender action resets the attacker state, so the posterior is
    then the first corner of the simplex.
    """
    if a_D != 0:
        return np.array(E1)
    b = np.asarray(b, dtype=float)
    stage = np.asarray(stage, dtype=float)
    post = np.zeros(N_CLASSES)
    for s in range(N_CLASSES):
        if b[s] == 0.0:
            continue
        for a in range(N_ATTACKER_ACTIONS):
            if stage[s, a] == 0.0:
                continue
            f = attacker_transition_probs(s, a, 0, p_brute, p_exploit)
            post += b[s] * stage[s, a] * obs_rows[:, o] * f
    norm = post.sum()
    if norm <= 0.0:
        raise FilterDegenerate(f"observation {o} has zero probability under the belief")
    return post / norm


def belief_update_batch(B: np.ndarray, a_D: np.ndarray, o: np.ndarray, T: np.ndarray, obs_rows: np.ndarray) -> np.ndarray:
    """Vectorized filter for many episodes of one node.

    ``B`` is ``(n, 3)``, ``T`` the continue matrix from :func:`continue_matrix`.
    Degenerate observations fall back to the predicted belief.
    """
    pred = B @ T
    post = pred * obs_rows[:, o].T
    norm = post.sum(axis=1, keepdims=True)
    ok = norm[:, 0] > 0.0
    post = np.where(ok[:, None], post / np.where(ok, norm[:, 0], 1.0)[:, None], pred)
    stop = a_D != 0
    if np.any(stop):
        post[stop] = E1
    return post
