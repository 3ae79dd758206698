"""Exact oracles for tiny games: outcome enumeration, belief-tree dynamic programming and matrix games.

Everything here enumerates the full state or history space and is only
usable with a handful of nodes, zones and observations.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from irgame.dynamics import N_CLASSES, ObservationModel, attacker_transition_probs
from irgame.infrastructure import GameConfig
from irgame.stopping import ZoneMdp
from irgame.strategies import ObservationRuleDefender, TableAttacker, TableDefender

ENUMERATION_BUDGET = 1000
CLASS_INTRUSION = np.array([0.0, 0.0, 1.0])


def zone_mdp_enumeration(mdp: ZoneMdp) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate every deterministic policy with a linear solve and keep the best."""
    nz = mdp.n_zones
    best_v, best_pol = None, None
    for choice in itertools.product(range(len(mdp.actions)), repeat=nz):
        P = np.zeros((nz, nz))
        r = np.empty(nz)
        for z, j in enumerate(choice):
            P[z, mdp.next_zone[z, j]] = 1.0
            r[z] = mdp.reward[z, j]
        v = np.linalg.solve(np.eye(nz) - mdp.gamma * P, r)
        # an optimal policy is optimal from every zone, hence maximizes the sum
        if best_v is None or v.sum() > best_v.sum():
            best_v, best_pol = v, np.array([mdp.actions[j] for j in choice])
    return best_v, best_pol


def _class_transition(stage: np.ndarray, cfg: GameConfig) -> np.ndarray:
    """Null-action class transition matrix implied by a class-stationary attacker table."""
    T = np.zeros((N_CLASSES, N_CLASSES))
    for c in range(N_CLASSES):
        for a in range(4):
            if stage[c, a] > 0:
                T[c] += stage[c, a] * attacker_transition_probs(c, a, 0, cfg.p_brute, cfg.p_exploit)
    return T


def _defender_probs(local, zone: int, obs: int, n_act: int) -> np.ndarray:
    if isinstance(local, TableDefender):
        return np.asarray(local.table[zone], dtype=float)
    if isinstance(local, ObservationRuleDefender):
        out = np.zeros(n_act)
        out[local.rule[obs + 1]] = 1.0
        return out
    raise TypeError(f"exact evaluation does not support {type(local).__name__}")


# --------------------------------------------------------------------------- exact returns


def exact_return(
    cfg: GameConfig,
    model: ObservationModel,
    defender_locals: Sequence,
    attacker_locals: Sequence[TableAttacker],
    horizon: int,
) -> float:
    """Expected discounted global-mode return by forward enumeration.

    Defender locals may depend on the zone and the last observation, attacker
    locals on the attacker-state class only. Nodes then evolve independently,
    so reachability probabilities are products of activity marginals.
    """
    n, nz, na = cfg.n_nodes, cfg.n_zones, cfg.n_defender_actions
    cost = np.asarray(cfg.cost_vector)
    active = np.asarray(cfg.zone_active, dtype=float)
    dists = [{(cfg.initial_zones[k], 0, -1): 1.0} for k in range(n)]
    total = 0.0
    for t in range(horizon):
        p_active = np.zeros(n)
        node_terms = np.zeros(n)
        new_dists = []
        for k in range(n):
            stage = attacker_locals[k].stage()
            nxt: dict[tuple, float] = {}
            for (z, c, o), pr in dists[k].items():
                p_active[k] += pr * active[z]
                pd = _defender_probs(defender_locals[k], z, o, na)
                node_terms[k] -= pr * (CLASS_INTRUSION[c] + pd @ cost)
                for aD in np.flatnonzero(pd):
                    z2 = aD - 1 if 1 <= aD <= nz else z
                    for aA in np.flatnonzero(stage[c]):
                        f = attacker_transition_probs(c, int(aA), int(aD), cfg.p_brute, cfg.p_exploit)
                        for c2 in np.flatnonzero(f):
                            w = pr * pd[aD] * stage[c, aA] * f[c2]
                            for o2 in np.flatnonzero(model.rows[k, c2]):
                                key = (int(z2), int(c2), int(o2))
                                nxt[key] = nxt.get(key, 0.0) + w * model.rows[k, c2, o2]
            new_dists.append(nxt)
        reach = np.zeros(n)
        for k in cfg.graph.topological_order:
            p = cfg.graph.parent_index[k]
            reach[k] = p_active[k] * (1.0 if p == -1 else reach[p])
        total += cfg.gamma**t * float((cfg.eta * cfg.utility_scale * reach + node_terms).sum())
        dists = new_dists
    return total


# --------------------------------------------------------------------------- global best response


def global_best_response_value(
    cfg: GameConfig, model: ObservationModel, attacker_locals: Sequence[TableAttacker], horizon: int
) -> float:
    """Optimal finite-horizon defender value against class-stationary attackers.

    Dynamic programming over the joint belief on all nodes' attacker classes
    (no factorization assumed) with every joint defender action considered.
    """
    n, nz, na = cfg.n_nodes, cfg.n_zones, cfg.n_defender_actions
    n_obs = model.n_obs
    cost = np.asarray(cfg.cost_vector)
    active = np.asarray(cfg.zone_active, dtype=bool)
    classes = list(itertools.product(range(N_CLASSES), repeat=n))
    S = len(classes)
    intr = np.array([sum(CLASS_INTRUSION[c] for c in cl) for cl in classes])
    node_T = [_class_transition(attacker_locals[k].stage(), cfg) for k in range(n)]
    # joint null-action transition for each subset of reset nodes
    resets = list(itertools.product((False, True), repeat=n))
    joint_T = {}
    for rs in resets:
        M = np.ones((S, S))
        for i, ci in enumerate(classes):
            for j, cj in enumerate(classes):
                v = 1.0
                for k in range(n):
                    v *= (1.0 if cj[k] == 0 else 0.0) if rs[k] else node_T[k][ci[k], cj[k]]
                M[i, j] = v
        joint_T[rs] = M
    obs_joint = list(itertools.product(range(n_obs), repeat=n))
    Z = np.ones((S, len(obs_joint)))
    for i, cl in enumerate(classes):
        for j, oj in enumerate(obs_joint):
            for k in range(n):
                Z[i, j] *= model.rows[k, cl[k], oj[k]]
    actions = list(itertools.product(range(na), repeat=n))

    def reach_count(zones) -> float:
        reach = [False] * n
        for k in cfg.graph.topological_order:
            p = cfg.graph.parent_index[k]
            reach[k] = bool(active[zones[k]]) and (True if p == -1 else reach[p])
        return float(sum(reach))

    @lru_cache(maxsize=None)
    def V(t: int, zones: tuple, bkey: tuple) -> float:
        if t == horizon:
            return 0.0
        b = np.array(bkey)
        base = cfg.eta * cfg.utility_scale * reach_count(zones) - float(b @ intr)
        best = -np.inf
        for a in actions:
            val = base - float(sum(cost[x] for x in a))
            if t + 1 < horizon:
                rs = tuple(x != 0 for x in a)
                z2 = tuple(x - 1 if 1 <= x <= nz else z for x, z in zip(a, zones))
                pred = b @ joint_T[rs]
                joint = pred[:, None] * Z
                p_o = joint.sum(axis=0)
                cont = 0.0
                for j in np.flatnonzero(p_o > 0):
                    post = joint[:, j] / p_o[j]
                    cont += p_o[j] * V(t + 1, z2, tuple(np.round(post, 14)))
                val += cfg.gamma * cont
            best = max(best, val)
        return best

    b0 = np.zeros(S)
    b0[0] = 1.0
    return V(0, tuple(cfg.initial_zones), tuple(b0))


# --------------------------------------------------------------------------- node best responses


@dataclass(frozen=True)
class NodePolicy:
    """Finite-horizon node policy: action per (t, zone, rounded belief)."""

    table: dict

    def action(self, t: int, zone: int, b: np.ndarray) -> int:
        return self.table[(t, zone, tuple(np.round(b, 14)))]


def node_best_response(
    cfg: GameConfig, model: ObservationModel, k: int, attacker: TableAttacker, horizon: int
) -> tuple[float, NodePolicy]:
    """Exact finite-horizon best response in the node subgame with node-local utility."""
    nz, na = cfg.n_zones, cfg.n_defender_actions
    weight = len(cfg.graph.ancestors_of_index(k))
    cost = np.asarray(cfg.cost_vector)
    active = np.asarray(cfg.zone_active, dtype=float)
    T = _class_transition(attacker.stage(), cfg)
    rows = model.rows[k]
    policy: dict = {}

    @lru_cache(maxsize=None)
    def V(t: int, zone: int, bkey: tuple) -> float:
        if t == horizon:
            return 0.0
        b = np.array(bkey)
        best, best_a = -np.inf, 0
        for a in range(na):
            z2 = a - 1 if 1 <= a <= nz else zone
            val = cfg.eta * cfg.utility_scale * weight * active[z2] - (b[2] + cost[a])
            if t + 1 < horizon:
                pred = np.array([1.0, 0.0, 0.0]) if a != 0 else b @ T
                joint = pred[:, None] * rows
                p_o = joint.sum(axis=0)
                cont = 0.0
                for o in np.flatnonzero(p_o > 0):
                    post = joint[:, o] / p_o[o]
                    cont += p_o[o] * V(t + 1, z2, tuple(np.round(post, 14)))
                val += cfg.gamma * cont
            if val > best:
                best, best_a = val, a
        policy[(t, zone, bkey)] = best_a
        return best

    v = V(0, cfg.initial_zones[k], (1.0, 0.0, 0.0))
    return v, NodePolicy(policy)


def composite_value(
    cfg: GameConfig,
    model: ObservationModel,
    policies: Sequence[NodePolicy],
    attacker_locals: Sequence[TableAttacker],
    horizon: int,
) -> float:
    """Exact global-mode value of per-node belief policies; nodes evolve independently."""
    n, nz = cfg.n_nodes, cfg.n_zones
    cost = np.asarray(cfg.cost_vector)
    active = np.asarray(cfg.zone_active, dtype=float)
    dists = [{(cfg.initial_zones[k], 0, (1.0, 0.0, 0.0)): 1.0} for k in range(n)]
    total = 0.0
    for t in range(horizon):
        p_active = np.zeros(n)
        terms = np.zeros(n)
        new = []
        for k in range(n):
            T = _class_transition(attacker_locals[k].stage(), cfg)
            rows = model.rows[k]
            nxt: dict = {}
            for (z, c, bkey), pr in dists[k].items():
                b = np.array(bkey)
                a = policies[k].action(t, z, b)
                p_active[k] += pr * active[z]
                terms[k] -= pr * (CLASS_INTRUSION[c] + cost[a])
                z2 = a - 1 if 1 <= a <= nz else z
                if a != 0:
                    pred, cls_next = np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])
                else:
                    pred, cls_next = b @ T, T[c]
                for c2 in np.flatnonzero(cls_next):
                    for o in np.flatnonzero(rows[c2]):
                        joint = pred * rows[:, o]
                        post = tuple(np.round(joint / joint.sum(), 14))
                        key = (z2, int(c2), post)
                        nxt[key] = nxt.get(key, 0.0) + pr * cls_next[c2] * rows[c2, o]
            new.append(nxt)
        reach = np.zeros(n)
        for k in cfg.graph.topological_order:
            p = cfg.graph.parent_index[k]
            reach[k] = p_active[k] * (1.0 if p == -1 else reach[p])
        total += cfg.gamma**t * float((cfg.eta * cfg.utility_scale * reach + terms).sum())
        dists = new
    return total


# --------------------------------------------------------------------------- matrix games


def solve_matrix_game(A: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Value and optimal mixtures of a zero-sum game where the row player maximizes ``A``."""
    A = np.asarray(A, dtype=float)
    m, n = A.shape
    # row player: max v s.t. A^T x >= v, sum x = 1
    c = np.zeros(m + 1)
    c[-1] = -1.0
    res_x = linprog(
        c,
        A_ub=np.hstack([-A.T, np.ones((n, 1))]),
        b_ub=np.zeros(n),
        A_eq=np.hstack([np.ones((1, m)), np.zeros((1, 1))]),
        b_eq=[1.0],
        bounds=[(0, None)] * m + [(None, None)],
        method="highs",
    )
    c = np.zeros(n + 1)
    c[-1] = 1.0
    res_y = linprog(
        c,
        A_ub=np.hstack([A, -np.ones((m, 1))]),
        b_ub=np.zeros(m),
        A_eq=np.hstack([np.ones((1, n)), np.zeros((1, 1))]),
        b_eq=[1.0],
        bounds=[(0, None)] * n + [(None, None)],
        method="highs",
    )
    if not (res_x.success and res_y.success):
        raise RuntimeError("matrix game LP failed")
    x = np.clip(res_x.x[:m], 0, None)
    y = np.clip(res_y.x[:n], 0, None)
    return float(res_x.x[-1]), x / x.sum(), y / y.sum()


def fictitious_play_matrix(A: np.ndarray, iterations: int = 100_000) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Classic fictitious play; returns lower and upper value bounds and the empirical mixtures."""
    A = np.asarray(A, dtype=float)
    m, n = A.shape
    cx, cy = np.zeros(m), np.zeros(n)
    row_payoff, col_payoff = np.zeros(m), np.zeros(n)
    i, j = 0, 0
    for _ in range(iterations):
        cx[i] += 1
        cy[j] += 1
        row_payoff += A[:, j]
        col_payoff += A[i, :]
        i = int(np.argmax(row_payoff))
        j = int(np.argmin(col_payoff))
    x, y = cx / cx.sum(), cy / cy.sum()
    return float((x @ A).min()), float((A @ y).max()), x, y


@dataclass
class TinyGame:
    cfg: GameConfig
    model: ObservationModel
    horizon: int
    defender_actions: tuple[int, ...] = (0, -1)  # -1 stands for access control
    attacker_legal: bool = True

    def defender_strategies(self) -> list[ObservationRuleDefender]:
        na = self.cfg.n_defender_actions
        acts = [a if a >= 0 else na - 1 for a in self.defender_actions]
        combos = itertools.product(acts, repeat=self.model.n_obs + 1)
        return [ObservationRuleDefender(tuple(int(a) for a in r)) for r in combos]

    def attacker_strategies(self) -> list[TableAttacker]:
        return [TableAttacker.pure(h, d) for h in (0, 1) for d in (0, 1, 2, 3)]


def tiny_game_payoff(game: TinyGame, defenders=None, attackers=None) -> tuple[np.ndarray, list, list]:
    defenders = defenders if defenders is not None else game.defender_strategies()
    attackers = attackers if attackers is not None else game.attacker_strategies()
    if len(defenders) > ENUMERATION_BUDGET or len(attackers) > ENUMERATION_BUDGET:
        raise ValueError("enumeration budget exceeded")
    n = game.cfg.n_nodes
    A = np.array(
        [[exact_return(game.cfg, game.model, [d] * n, [a] * n, game.horizon) for a in attackers] for d in defenders]
    )
    return A, defenders, attackers


def brute_force_equilibrium(game: TinyGame | np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Value and equilibrium mixtures of an enumerable game (or of a given payoff matrix)."""
    A = game if isinstance(game, np.ndarray) else tiny_game_payoff(game)[0]
    return solve_matrix_game(A)
