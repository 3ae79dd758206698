"""Defender best response per node: which action to take (zone MDP) and when (stopping POMDP)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from irgame.decomposition import NodeSubgame, local_stage_utility
from irgame.dynamics import N_CLASSES, NodeState, ObservationModel
from irgame.infrastructure import GameConfig

log = logging.getLogger(__name__)

CONTINUE, STOP = "C", "S"
THETA_FLOOR = 1e-6
TP2_TOL = 1e-12
MAX_GRID_WORK = 2_000_000


def horizon_for(gamma: float, tail: float = 1e-4) -> int:
    """Smallest T with gamma**T < tail; 88 at gamma = 0.9."""
    if gamma <= 0.0:
        return 1
    return int(np.floor(np.log(tail) / np.log(gamma))) + 1


# --------------------------------------------------------------------------- TP-2


@dataclass(frozen=True)
class Minor:
    rows: tuple[int, int]
    cols: tuple[int, int]
    value: float


def _minors(M: np.ndarray):
    for i in range(M.shape[0]):
        for j in range(i + 1, M.shape[0]):
            # every column pair k < l at once
            D = np.outer(M[i], M[j]) - np.outer(M[j], M[i])
            yield i, j, np.triu(D, 1), np.triu(np.ones_like(D, dtype=bool), 1)


def tp2_check(matrix) -> tuple[bool, Minor | None]:
    """All 2x2 minors nonnegative up to ``TP2_TOL``; returns the most negative one otherwise."""
    M = np.asarray(matrix, dtype=float)
    worst: Minor | None = None
    for i, j, D, mask in _minors(M):
        vals = np.where(mask, D, np.inf)
        k, l = np.unravel_index(np.argmin(vals), vals.shape)
        v = vals[k, l]
        if v < -TP2_TOL and (worst is None or v < worst.value):
            worst = Minor((i, j), (int(k), int(l)), float(v))
    return worst is None, worst


def tp2_summary(matrix) -> tuple[float, float]:
    """Fraction of nonnegative 2x2 minors and the most negative minor (0 if none)."""
    M = np.asarray(matrix, dtype=float)
    total = nonneg = 0
    worst = 0.0
    for _, _, D, mask in _minors(M):
        vals = D[mask]
        total += vals.size
        nonneg += int(np.count_nonzero(vals >= -TP2_TOL))
        if vals.size:
            worst = min(worst, float(vals.min()))
    return (nonneg / total if total else 1.0), worst


# --------------------------------------------------------------------------- stopping POMDP


@dataclass(frozen=True)
class StoppingPomdp:
    """Three-class stopping problem; ``utility[class, 0]`` continues, ``utility[class, 1]`` stops."""

    p: float
    q: float
    obs_rows: np.ndarray
    utility: np.ndarray
    gamma: float

    def __post_init__(self):
        rows = np.asarray(self.obs_rows, dtype=float)
        util = np.asarray(self.utility, dtype=float)
        if rows.shape[0] != N_CLASSES or util.shape != (N_CLASSES, 2):
            raise ValueError("a stopping problem has three classes and two actions")
        if not (0 <= self.p <= 1 and 0 <= self.q <= 1):
            raise ValueError("p and q must be probabilities")
        object.__setattr__(self, "obs_rows", rows)
        object.__setattr__(self, "utility", util)

    @cached_property
    def continue_matrix(self) -> np.ndarray:
        p, q = self.p, self.q
        return np.array([[1 - p, p, 0.0], [0.0, 1 - q, q], [0.0, 0.0, 1.0]])

    @cached_property
    def stop_matrix(self) -> np.ndarray:
        return np.tile([1.0, 0.0, 0.0], (N_CLASSES, 1))

    @property
    def n_obs(self) -> int:
        return self.obs_rows.shape[1]


def stage_pq(stage: np.ndarray, p_brute: float, p_exploit: float) -> tuple[float, float]:
    stage = np.asarray(stage, dtype=float)
    if stage.shape != (3, 4) or np.any(stage < 0) or np.any(np.abs(stage.sum(axis=1) - 1) > 1e-9):
        raise ValueError("stage strategy is not a distribution per class")
    return float(stage[0, 1]), float(stage[1, 2] * p_brute + stage[1, 3] * p_exploit)


def build_stopping_pomdp(
    sub: NodeSubgame,
    zone: int,
    which_action: int,
    attacker_stage: np.ndarray,
    model: ObservationModel,
    cfg: GameConfig,
) -> StoppingPomdp:
    if which_action == 0:
        raise ValueError("the stop action must differ from the null action")
    p, q = stage_pq(attacker_stage, cfg.p_brute, cfg.p_exploit)
    util = np.empty((N_CLASSES, 2))
    for c in range(N_CLASSES):
        s = NodeState(zone, int(c > 0), int(c == 2), int(cfg.zone_active[zone]))
        util[c, 0] = local_stage_utility(sub, s, 0, cfg)
        util[c, 1] = local_stage_utility(sub, s, which_action, cfg)
    return StoppingPomdp(p, q, model.rows[sub.index], util, cfg.gamma)


# --------------------------------------------------------------------------- zone MDP


@dataclass(frozen=True)
class ZoneMdp:
    """Fully observed which-action problem: ``reward[z, j]`` and ``next_zone[z, j]`` for ``actions[j]``."""

    actions: tuple[int, ...]
    reward: np.ndarray
    next_zone: np.ndarray
    gamma: float

    @property
    def n_zones(self) -> int:
        return self.reward.shape[0]


def build_zone_mdp(sub: NodeSubgame, cfg: GameConfig) -> ZoneMdp:
    nz = cfg.n_zones
    actions = tuple(range(1, nz + 2))
    reward = np.empty((nz, len(actions)))
    nxt = np.empty((nz, len(actions)), dtype=np.int64)
    for z in range(nz):
        for j, a in enumerate(actions):
            reward[z, j] = local_stage_utility(sub, NodeState(z, 0, 0, int(cfg.zone_active[z])), a, cfg)
            nxt[z, j] = a - 1 if a <= nz else z
    return ZoneMdp(actions, reward, nxt, cfg.gamma)


def solve_zone_mdp(
    mdp: ZoneMdp, tol: float = 1e-8, max_sweeps: int = 10_000, history: list | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Value iteration; returns values per zone and the greedy action code per zone."""
    if not 0 <= mdp.gamma < 1 or tol <= 0:
        raise ValueError("need gamma in [0, 1) and a positive tolerance")
    V = np.zeros(mdp.n_zones)
    for sweep in range(1, max_sweeps + 1):
        Q = mdp.reward + mdp.gamma * V[mdp.next_zone]
        V_new = Q.max(axis=1)
        res = float(np.max(np.abs(V_new - V)))
        V = V_new
        if history is not None:
            history.append(res)
        if res <= tol:
            break
    else:
        raise RuntimeError(f"zone MDP did not converge in {max_sweeps} sweeps")
    Q = mdp.reward + mdp.gamma * V[mdp.next_zone]
    return V, np.asarray(mdp.actions)[np.argmax(Q, axis=1)]


# --------------------------------------------------------------------------- threshold policies


@dataclass(frozen=True)
class ThresholdPolicy:
    theta1: float = 1.0
    theta2: float = 0.5

    def __post_init__(self):
        if self.theta1 < 1 or self.theta2 <= 0:
            raise ValueError("threshold needs theta1 >= 1 and theta2 > 0")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2])

    def stops(self, B: np.ndarray) -> np.ndarray:
        B = np.asarray(B, dtype=float)
        return B[..., 1] + self.theta1 * B[..., 2] - self.theta2 > 0


def threshold_decision(policy: ThresholdPolicy, b) -> str:
    return STOP if bool(policy.stops(np.asarray(b))) else CONTINUE


def project_theta(theta, floor: float = THETA_FLOOR) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return np.array([max(theta[0], 1.0), max(theta[1], floor)])


def _rollouts(pomdp: StoppingPomdp, stop_rule: Callable[[np.ndarray], np.ndarray], uniforms: np.ndarray, copies: int) -> np.ndarray:
    """Returns ``(copies, episodes)``; every copy replays the same uniforms."""
    _, T, E = uniforms.shape
    n = copies * E
    Tc = pomdp.continue_matrix
    cum_t = np.cumsum(Tc, axis=1)
    cdf_o = np.cumsum(pomdp.obs_rows, axis=1)
    cdf_o[:, -1] = 1.0
    # observation each class would emit, for every step at once
    o_by_class = np.minimum(
        np.stack([np.searchsorted(cdf_o[c], uniforms[1], side="right") for c in range(N_CLASSES)]),
        pomdp.n_obs - 1,
    )
    lik = pomdp.obs_rows.T
    u_c, u_s = pomdp.utility[:, 0], pomdp.utility[:, 1]
    cols = np.tile(np.arange(E), copies)
    s = np.zeros(n, dtype=np.int64)
    B = np.zeros((n, N_CLASSES))
    B[:, 0] = 1.0
    J = np.zeros(n)
    for t in range(T):
        stop = stop_rule(B)
        J += pomdp.gamma**t * np.where(stop, u_s[s], u_c[s])
        nxt = (cum_t[s] <= uniforms[0, t, cols][:, None]).sum(axis=1)
        s = np.where(stop, 0, np.minimum(nxt, N_CLASSES - 1))
        o = o_by_class[s, t, cols]
        post = (B @ Tc) * lik[o]
        norm = post.sum(axis=1)
        ok = norm > 0.0
        post[ok] /= norm[ok, None]
        post[~ok] = (B @ Tc)[~ok]
        post[stop] = (1.0, 0.0, 0.0)
        B = post
    return J.reshape(copies, E)


def stopping_returns(
    pomdp: StoppingPomdp,
    stop_rule: Callable[[np.ndarray], np.ndarray],
    uniforms: np.ndarray,
) -> np.ndarray:
    """Discounted returns from the healthy state under common uniforms ``(2, horizon, episodes)``."""
    return _rollouts(pomdp, stop_rule, uniforms, 1)[0]


def threshold_returns(pomdp: StoppingPomdp, thetas: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Returns ``(len(thetas), episodes)`` for several threshold vectors on the same uniforms."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    E = uniforms.shape[2]
    th1 = np.repeat(thetas[:, 0], E)
    th2 = np.repeat(thetas[:, 1], E)
    return _rollouts(pomdp, lambda B: B[:, 1] + th1 * B[:, 2] - th2 > 0, uniforms, len(thetas))


def evaluate_threshold(pomdp: StoppingPomdp, theta, episodes: int, rng: np.random.Generator, horizon: int | None = None) -> np.ndarray:
    T = horizon or horizon_for(pomdp.gamma)
    pol = ThresholdPolicy(*project_theta(theta))
    return stopping_returns(pomdp, pol.stops, rng.random((2, T, episodes)))


@dataclass(frozen=True)
class SpsaParams:
    a: float = 1.0
    A: float = 100.0
    c: float = 10.0
    lam: float = 0.602
    eps: float = 0.101
    N: int = 50
    episodes: int = 200
    eval_episodes: int = 1000
    horizon: int | None = None
    theta0: tuple[float, float] = (1.0, 0.5)
    # extra starting candidates, scored once before the first iteration
    start_grid: tuple[tuple[float, float], ...] = tuple(
        (t1, t2) for t1 in (1.0, 2.0) for t2 in (0.25, 0.5, 0.75, 1.0, 1.25)
    )


def spsa_fit_threshold(
    pomdp: StoppingPomdp,
    params: SpsaParams = SpsaParams(),
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> ThresholdPolicy:
    """Fit the linear threshold by simultaneous-perturbation gradient ascent.

    Paired rollouts share their uniforms. The start is the best of ``theta0``
    and ``start_grid``; every iterate is scored on one fixed evaluation stream
    and the best one is returned. ``trace`` receives ``(theta, score)`` per
    iterate, starting with the chosen start.
    """
    rng = rng if rng is not None else np.random.default_rng()
    T = params.horizon or horizon_for(pomdp.gamma)
    eval_u = rng.random((2, T, params.eval_episodes))

    def score(thetas):
        return threshold_returns(pomdp, thetas, eval_u).mean(axis=1)

    starts = np.array([project_theta(params.theta0)] + [project_theta(t) for t in params.start_grid])
    start_vals = score(starts)
    i0 = int(np.argmax(start_vals))
    theta = best = starts[i0]
    best_val = float(start_vals[i0])
    if trace is not None:
        trace.append((tuple(theta), best_val))
    for k in range(params.N):
        a_k = params.a / (k + 1 + params.A) ** params.lam
        c_k = params.c / (k + 1) ** params.eps
        delta = rng.choice([-1.0, 1.0], size=2)
        U = rng.random((2, T, params.episodes))
        pair = np.array([project_theta(theta + c_k * delta), project_theta(theta - c_k * delta)])
        j_plus, j_minus = threshold_returns(pomdp, pair, U).mean(axis=1)
        grad = (j_plus - j_minus) / (2.0 * c_k * delta)
        theta = project_theta(theta + a_k * grad)
        val = float(score(theta[None])[0])
        if trace is not None:
            trace.append((tuple(theta), val))
        if val > best_val:
            best, best_val = theta, val
    return ThresholdPolicy(*best)


# --------------------------------------------------------------------------- belief-grid oracle


def simplex_grid(resolution: int) -> np.ndarray:
    R = resolution
    pts = [(R - j - k, j, k) for j in range(R + 1) for k in range(R + 1 - j)]
    return np.array(pts, dtype=float) / R


@dataclass
class GridSolution:
    resolution: int
    points: np.ndarray
    values: np.ndarray
    stop: np.ndarray
    sweeps: int
    residuals: list = field(default_factory=list)

    def index_of(self, b) -> int:
        return int(np.argmin(((self.points - np.asarray(b)) ** 2).sum(axis=1)))

    def value_at(self, b) -> float:
        return float(self.values[self.index_of(b)])

    def decide(self, B: np.ndarray) -> np.ndarray:
        B = np.atleast_2d(B)
        idx = nearest_grid_index(self.points, B)
        return self.stop[idx]


def nearest_grid_index(points: np.ndarray, B: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty(len(B), dtype=np.int64)
    for s in range(0, len(B), chunk):
        d = ((B[s : s + chunk, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        out[s : s + chunk] = np.argmin(d, axis=1)
    return out


def _grid_tables(pomdp: StoppingPomdp, points: np.ndarray):
    pred = points @ pomdp.continue_matrix
    joint = pred[:, None, :] * pomdp.obs_rows.T[None, :, :]
    p_obs = joint.sum(axis=2)
    safe = np.where(p_obs > 0, p_obs, 1.0)
    nxt_b = joint / safe[..., None]
    G, O = p_obs.shape
    nxt = nearest_grid_index(points, nxt_b.reshape(G * O, N_CLASSES)).reshape(G, O)
    return p_obs, nxt


def belief_grid_oracle(
    pomdp: StoppingPomdp,
    resolution: int,
    tol: float = 1e-9,
    max_sweeps: int = 100_000,
    stop_value: float | None = None,
) -> GridSolution:
    """Value iteration on the discretized belief simplex.

    With ``stop_value`` set, stopping ends the problem with that continuation
    value in place of the value at the first corner (single-stop form).
    """
    if resolution < 1:
        raise ValueError("resolution must be at least 1")
    points = simplex_grid(resolution)
    if pomdp.n_obs > 64 or len(points) * pomdp.n_obs > MAX_GRID_WORK:
        raise ValueError("grid oracle budget exceeded: reduce the resolution or observation space")
    p_obs, nxt = _grid_tables(pomdp, points)
    r_c = points @ pomdp.utility[:, 0]
    r_s = points @ pomdp.utility[:, 1]
    e1 = 0  # simplex_grid lists the first corner first
    g = pomdp.gamma
    V = np.zeros(len(points))
    residuals = []
    for sweep in range(1, max_sweeps + 1):
        q_c = r_c + g * (p_obs * V[nxt]).sum(axis=1)
        q_s = r_s + g * (V[e1] if stop_value is None else stop_value)
        V_new = np.maximum(q_c, q_s)
        res = float(np.max(np.abs(V_new - V)))
        residuals.append(res)
        V = V_new
        if res <= tol:
            break
    else:
        raise RuntimeError("grid value iteration did not converge")
    q_c = r_c + g * (p_obs * V[nxt]).sum(axis=1)
    q_s = r_s + g * (V[e1] if stop_value is None else stop_value)
    return GridSolution(resolution, points, V, q_s > q_c, sweep, residuals)


def single_stop_value(pomdp: StoppingPomdp, resolution: int, tol: float = 1e-9, max_rounds: int = 10_000) -> float:
    """Value at the first corner when each stop ends the problem and pays a restart value.

    The restart value is iterated to its fixed point.
    """
    K = 0.0
    for _ in range(max_rounds):
        sol = belief_grid_oracle(pomdp, resolution, tol, stop_value=K)
        K_new = float(sol.values[0])
        if abs(K_new - K) <= tol:
            return K_new
        K = K_new
    raise RuntimeError("restart value did not converge")


def mlr_line_patterns(sol: GridSolution) -> list[str]:
    """Decision strings along every grid line from the first corner to the opposite edge."""
    R = sol.resolution
    counts = np.rint(sol.points * R).astype(int)
    out = []
    for a in range(R + 1):
        # edge point (0, a, R - a)
        on_line = counts[:, 1] * (R - a) == counts[:, 2] * a
        idx = np.flatnonzero(on_line)
        idx = idx[np.argsort(counts[idx, 1] + counts[idx, 2], kind="stable")]
        out.append("".join(STOP if sol.stop[i] else CONTINUE for i in idx))
    return out


def count_reversals(patterns: Sequence[str]) -> int:
    """Number of S-to-C transitions; zero means every line is C...CS...S."""
    return sum(p.count(STOP + CONTINUE) for p in patterns)


# --------------------------------------------------------------------------- node strategy


@dataclass(frozen=True)
class ThresholdStrategy:
    """Defender node strategy: in zone ``z`` play ``which[z]`` once the belief crosses ``thetas[z]``.

    ``rho`` is the stop probability published as this strategy's zone stage.
    """

    which: tuple[int, ...]
    thetas: tuple[tuple[float, float], ...]
    rho: float = 0.05

    def act(self, zone, belief, obs, u):
        th = np.asarray(self.thetas)[zone]
        B = np.asarray(belief)
        stop = B[:, 1] + th[:, 0] * B[:, 2] - th[:, 1] > 0
        return np.where(stop, np.asarray(self.which)[zone], 0)

    @classmethod
    def stacked(cls, members, pos):
        """One ``act`` for many members; row ``i`` of the batch plays ``members[pos[i]]``."""
        which = np.array([m.which for m in members])[pos]
        thetas = np.array([m.thetas for m in members], dtype=float)[pos]

        def act(zone, belief, obs, u):
            r = np.arange(len(zone))
            th = thetas[r, zone]
            B = np.asarray(belief)
            stop = B[:, 1] + th[:, 0] * B[:, 2] - th[:, 1] > 0
            return np.where(stop, which[r, zone], 0)

        return act

    def zone_stage(self, n_zones: int) -> np.ndarray:
        out = np.zeros((n_zones, n_zones + 2))
        out[:, 0] = 1.0 - self.rho
        out[np.arange(n_zones), np.asarray(self.which)] += self.rho
        return out

    def to_dict(self):
        return {
            "type": "threshold_defender",
            "which": list(self.which),
            "thetas": [list(t) for t in self.thetas],
            "rho": self.rho,
        }

    @classmethod
    def from_dict(cls, d) -> ThresholdStrategy:
        return cls(tuple(d["which"]), tuple(tuple(t) for t in d["thetas"]), d.get("rho", 0.05))


def defender_best_response(
    sub: NodeSubgame,
    attacker_stage: np.ndarray,
    model: ObservationModel,
    cfg: GameConfig,
    params: SpsaParams = SpsaParams(),
    rng: np.random.Generator | None = None,
) -> ThresholdStrategy:
    """Zone MDP for the action, one SPSA-fitted threshold per zone for the timing."""
    rng = rng if rng is not None else np.random.default_rng()
    _, which = solve_zone_mdp(build_zone_mdp(sub, cfg))
    fitted: dict[tuple, tuple[float, float]] = {}
    thetas = []
    for z in range(cfg.n_zones):
        pomdp = build_stopping_pomdp(sub, z, int(which[z]), attacker_stage, model, cfg)
        key = tuple(pomdp.utility.ravel())
        if key not in fitted:
            pol = spsa_fit_threshold(pomdp, params, rng)
            fitted[key] = (pol.theta1, pol.theta2)
        thetas.append(fitted[key])
    log.debug("node %s thresholds %s", sub.node, thetas)
    return ThresholdStrategy(tuple(int(a) for a in which), tuple(thetas))
