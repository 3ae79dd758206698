"""Vectorized, seeded episode engine.

Each step draws a ``(4, episodes, nodes)`` block of uniforms in a fixed order
(defender policy, attacker policy, transition, observation) no matter which
strategies are plugged in. Per-episode mixture members are drawn once, before
the first step. As a consequence the random inputs of a node never depend on
the strategies played at other nodes.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from irgame.dynamics import (
    E1,
    N_ATTACKER_ACTIONS,
    N_CLASSES,
    GlobalState,
    IllegalAction,
    NodeState,
    ObservationModel,
    attacker_transition_probs,
    belief_update_batch,
    continue_matrix,
)
from irgame.infrastructure import GameConfig
from irgame.strategies import sample_codes


def attacker_transition_table(p_brute: float, p_exploit: float) -> np.ndarray:
    """``P[class, a_A, next_class]`` under a null defender action; illegal pairs are zero."""
    P = np.zeros((N_CLASSES, N_ATTACKER_ACTIONS, N_CLASSES))
    for c in range(N_CLASSES):
        for a in range(N_ATTACKER_ACTIONS):
            if c == 0 and a >= 2:
                continue
            P[c, a] = attacker_transition_probs(c, a, 0, p_brute, p_exploit)
    return P


def mixture_weights(strategy) -> tuple[list, np.ndarray]:
    members = strategy.members()
    return [m for m, _ in members], np.array([w for _, w in members], dtype=float)


def published_stage(strategy, k: int) -> np.ndarray:
    return np.asarray(strategy.stage(k), dtype=float)


def published_zone_stage(strategy, k: int, n_zones: int) -> np.ndarray:
    return np.asarray(strategy.zone_stage(k, n_zones), dtype=float)


def zone_filter_batch(
    B: np.ndarray, old_cls: np.ndarray, new_cls: np.ndarray, a_A: np.ndarray, pi: np.ndarray, P: np.ndarray
) -> np.ndarray:
    """Attacker's filter over the defender zone of one node.

    The attacker sees its own state move, which tells it whether a reset
    happened. ``pi`` is the defender's published zone stage ``(zones, actions)``.
    """
    nz = B.shape[1]
    w_null = B * pi[:, 0]
    w_stay = B * pi[:, nz + 1]
    moved = B @ pi[:, 1 : nz + 1]
    like_null = P[old_cls, a_A, new_cls]
    like_reset = (new_cls == 0).astype(float)
    post = like_null[:, None] * w_null + like_reset[:, None] * (w_stay + moved)
    norm = post.sum(axis=1, keepdims=True)
    pred = w_null + w_stay + moved
    ok = norm[:, 0] > 0.0
    post = np.where(ok[:, None], post / np.where(ok, norm[:, 0], 1.0)[:, None], pred / pred.sum(axis=1, keepdims=True))
    return post


@dataclass
class EpisodeBatch:
    """Returns of a batch of episodes plus optional per-step records.

    ``node_utils`` holds per-node terms: the workflow-summed stage utility in
    global mode is ``returns``; in local mode each node is its own subgame.
    """

    returns: np.ndarray
    node_returns: np.ndarray
    workflow_returns: dict[str, np.ndarray]
    nodes: tuple[int, ...]
    steps: dict[str, np.ndarray] | None = None


def _check_closed(cfg: GameConfig, idx: Sequence[int]) -> None:
    chosen = set(idx)
    for k in idx:
        p = cfg.graph.parent_index[k]
        if p != -1 and p not in chosen:
            raise ValueError("global-mode simulation needs a node set closed under ancestors")


def _member_actors(members, choice: np.ndarray, k: int) -> list:
    """``(episode indices, act)`` pairs covering the episodes that drew some member.

    Members whose node-``k`` strategies share a type with a ``stacked``
    constructor are evaluated in one vectorized call.
    """
    locs = [m.local(k) for m in members]
    groups: dict[type, list[int]] = {}
    for i, loc in enumerate(locs):
        groups.setdefault(type(loc), []).append(i)
    out = []
    for typ, ids in groups.items():
        sel = np.flatnonzero(np.isin(choice, ids))
        if sel.size == 0:
            continue
        if len(ids) > 1 and hasattr(typ, "stacked"):
            pos = np.searchsorted(ids, choice[sel])
            out.append((sel, typ.stacked([locs[i] for i in ids], pos)))
        else:
            for i in ids:
                s = np.flatnonzero(choice == i)
                if s.size:
                    out.append((s, locs[i].act))
    return out


def run_episodes(
    cfg: GameConfig,
    model: ObservationModel,
    defender,
    attacker,
    episodes: int,
    horizon: int,
    rng: np.random.Generator,
    *,
    nodes: Sequence[int] | None = None,
    mode: str = "global",
    record: bool = False,
) -> EpisodeBatch:
    """Simulate ``episodes`` independent episodes of ``horizon`` steps.

    ``nodes`` are node positions (not ids); by default all nodes. In
    ``"global"`` mode the return is the workflow-summed stage utility on the
    pre-transition state; in ``"local"`` mode every node earns its node-local
    utility with ancestor weight and post-action activity.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if mode not in ("global", "local"):
        raise ValueError(f"unknown mode {mode!r}")
    idx = tuple(range(cfg.n_nodes)) if nodes is None else tuple(sorted(nodes))
    if mode == "global":
        _check_closed(cfg, idx)
    E, n, nz = episodes, len(idx), cfg.n_zones
    pos = {k: j for j, k in enumerate(idx)}
    gamma = cfg.gamma
    scale = cfg.eta * cfg.utility_scale
    cost = np.asarray(cfg.cost_vector)
    zone_active = np.asarray(cfg.zone_active, dtype=bool)
    parent_pos = [pos.get(cfg.graph.parent_index[k], -1) for k in idx]
    topo = [pos[k] for k in cfg.graph.topological_order if k in pos]
    weights = np.array([len(cfg.graph.ancestors_of_index(k)) for k in idx], dtype=float)
    wf_members = {
        w: [pos[cfg.graph.index[m]] for m in members if cfg.graph.index[m] in pos]
        for w, members in cfg.graph.workflows.items()
    }
    wf_members = {w: m for w, m in wf_members.items() if m}
    P = attacker_transition_table(cfg.p_brute, cfg.p_exploit)

    d_members, d_w = mixture_weights(defender)
    a_members, a_w = mixture_weights(attacker)
    u0 = rng.random((2, E))
    kD = sample_codes(np.broadcast_to(d_w, (E, len(d_w))), u0[0])
    kA = sample_codes(np.broadcast_to(a_w, (E, len(a_w))), u0[1])
    d_act = [_member_actors(d_members, kD, k) for k in idx]
    a_act = [_member_actors(a_members, kA, k) for k in idx]

    T_cont = [continue_matrix(published_stage(attacker, k), cfg.p_brute, cfg.p_exploit) for k in idx]
    pi_zone = [published_zone_stage(defender, k, nz) for k in idx]

    zones = np.tile(np.asarray(cfg.initial_zones)[list(idx)], (E, 1))
    recon = np.zeros((E, n), dtype=np.int64)
    intr = np.zeros((E, n), dtype=np.int64)
    last_obs = np.full((E, n), -1, dtype=np.int64)
    bD = np.zeros((E, n, N_CLASSES))
    bD[..., 0] = 1.0
    bA = np.zeros((E, n, nz))
    bA[np.arange(E)[:, None], np.arange(n)[None, :], zones] = 1.0

    J = np.zeros(E)
    J_node = np.zeros((E, n))
    J_wf = {w: np.zeros(E) for w in wf_members}
    rec: dict[str, list] = {k: [] for k in ("zone", "recon", "intrusion", "a_D", "a_A", "o", "u", "stage_u", "bD", "bA")}

    for t in range(horizon):
        u = rng.random((4, E, n))
        aD = np.zeros((E, n), dtype=np.int64)
        aA = np.zeros((E, n), dtype=np.int64)
        for j, k in enumerate(idx):
            for sel, act in d_act[j]:
                aD[sel, j] = act(zones[sel, j], bD[sel, j], last_obs[sel, j], u[0, sel, j])
            for sel, act in a_act[j]:
                aA[sel, j] = act(recon[sel, j], intr[sel, j], bA[sel, j], u[1, sel, j])
        if np.any((aA >= 2) & (recon == 0)):
            raise IllegalAction("attack action on an undiscovered node")

        if mode == "global":
            reach = np.zeros((E, n), dtype=bool)
            active = zone_active[zones]
            for j in topo:
                reach[:, j] = active[:, j] if parent_pos[j] == -1 else active[:, j] & reach[:, parent_pos[j]]
            terms = scale * reach.astype(float) - (intr.astype(float) + cost[aD])
            total = np.zeros(E)
            for w, members in wf_members.items():
                w_total = np.zeros(E)
                for j in members:
                    w_total = w_total + terms[:, j]
                J_wf[w] += gamma**t * w_total
                total = total + w_total
        else:
            new_zone_tmp = np.where((aD >= 1) & (aD <= nz), aD - 1, zones)
            terms = scale * weights * zone_active[new_zone_tmp].astype(float) - (intr.astype(float) + cost[aD])
            total = terms.sum(axis=1)
        J += gamma**t * total
        J_node += gamma**t * terms

        if record:
            for key, val in (
                ("zone", zones), ("recon", recon), ("intrusion", intr), ("a_D", aD), ("a_A", aA),
                ("u", terms), ("stage_u", total), ("bD", bD), ("bA", bA),
            ):
                rec[key].append(val.copy())

        # transitions
        old_cls = recon + intr
        zones = np.where((aD >= 1) & (aD <= nz), aD - 1, zones)
        p_hit = np.where(aA == 2, cfg.p_brute, np.where(aA == 3, cfg.p_exploit, 0.0))
        hit = (u[2] < p_hit) & (recon == 1) & (intr == 0)
        recon = np.where(aA == 1, 1, recon)
        intr = np.where(hit, 1, intr)
        reset = aD != 0
        recon = np.where(reset, 0, recon)
        intr = np.where(reset, 0, intr)
        new_cls = recon + intr

        obs = np.empty((E, n), dtype=np.int64)
        for j, k in enumerate(idx):
            obs[:, j] = model.sample(k, new_cls[:, j], u[3, :, j])
            bD[:, j] = belief_update_batch(bD[:, j], aD[:, j], obs[:, j], T_cont[j], model.rows[k])
            bA[:, j] = zone_filter_batch(bA[:, j], old_cls[:, j], new_cls[:, j], aA[:, j], pi_zone[j], P)
        last_obs = obs
        if record:
            rec["o"].append(obs.copy())

    steps = {k: np.stack(v) for k, v in rec.items()} if record else None
    return EpisodeBatch(J, J_node, J_wf, idx, steps)


# --------------------------------------------------------------------------- trajectories


def discounted_return(utilities: Sequence[float], gamma: float) -> float:
    J = 0.0
    for t, u in enumerate(utilities):
        J += gamma**t * u
    return J


@dataclass(frozen=True)
class Step:
    state: GlobalState
    a_D: tuple[int, ...]
    a_A: tuple[int, ...]
    o: tuple[int, ...]
    u: float
    node_u: tuple[float, ...] = ()


@dataclass
class Trajectory:
    steps: list[Step]
    gamma: float
    node_ids: tuple[int, ...] = field(default=())

    @property
    def J(self) -> float:
        return discounted_return([s.u for s in self.steps], self.gamma)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "node", "zone", "recon", "intrusion", "a_D", "a_A", "o", "u"])
            for t, st in enumerate(self.steps, start=1):
                for j, node in enumerate(st.state.nodes):
                    w.writerow(
                        [t, self.node_ids[j], node.zone, node.recon, node.intrusion, st.a_D[j], st.a_A[j], st.o[j], repr(st.node_u[j])]
                    )


def simulate_episode(profile, T: int, cfg: GameConfig, model: ObservationModel, rng: np.random.Generator) -> Trajectory:
    """Play one global-mode episode and keep every step."""
    batch = run_episodes(cfg, model, profile.defender, profile.attacker, 1, T, rng, record=True)
    s = batch.steps
    active = np.asarray(cfg.zone_active, dtype=int)
    steps = []
    for t in range(T):
        nodes = tuple(
            NodeState(int(s["zone"][t, 0, j]), int(s["recon"][t, 0, j]), int(s["intrusion"][t, 0, j]), int(active[s["zone"][t, 0, j]]))
            for j in range(cfg.n_nodes)
        )
        steps.append(
            Step(
                GlobalState(nodes),
                tuple(int(x) for x in s["a_D"][t, 0]),
                tuple(int(x) for x in s["a_A"][t, 0]),
                tuple(int(x) for x in s["o"][t, 0]),
                float(s["stage_u"][t, 0]),
                tuple(float(x) for x in s["u"][t, 0]),
            )
        )
    return Trajectory(steps, cfg.gamma, cfg.graph.nodes)


def mean_and_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return float(x.mean()), float("nan")
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(len(x)))


__all__ = [
    "E1",
    "EpisodeBatch",
    "Step",
    "Trajectory",
    "attacker_transition_table",
    "discounted_return",
    "mean_and_se",
    "run_episodes",
    "simulate_episode",
    "zone_filter_batch",
]
