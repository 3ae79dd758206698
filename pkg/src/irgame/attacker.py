"""Attacker best response per node: a masked linear-softmax policy trained with clipped PPO."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from irgame.decomposition import CompositeStrategy, NodeSubgame
from irgame.dynamics import LEGAL_MASK, N_ATTACKER_ACTIONS, ObservationModel
from irgame.infrastructure import GameConfig
from irgame.simulation import run_episodes
from irgame.stopping import horizon_for
from irgame.strategies import TableAttacker, sample_codes, static_strategies

log = logging.getLogger(__name__)

MASK_VERSION = "legal-v1"
CLASS_BITS = ((0, 0), (1, 0), (1, 1))


def feature_names(n_zones: int) -> list[str]:
    return ["recon", "intrusion"] + [f"zone_belief_{z}" for z in range(n_zones)] + ["bias"]


def features(recon, intrusion, zone_belief) -> np.ndarray:
    recon = np.asarray(recon, dtype=float)
    zb = np.asarray(zone_belief, dtype=float)
    return np.concatenate(
        [recon[..., None], np.asarray(intrusion, dtype=float)[..., None], zb, np.ones(recon.shape + (1,))], axis=-1
    )


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class LinearSoftmaxPolicy:
    """``weights[a]`` scores action ``a`` linearly in the features; illegal actions are masked out."""

    weights: np.ndarray
    n_zones: int
    ref_belief: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (N_ATTACKER_ACTIONS, self.n_zones + 3):
            raise ValueError("weight matrix must be 4 x (zones + 3)")
        if self.ref_belief is None:
            self.ref_belief = np.full(self.n_zones, 1.0 / self.n_zones)
        self.ref_belief = np.asarray(self.ref_belief, dtype=float)

    @classmethod
    def uniform(cls, n_zones: int) -> LinearSoftmaxPolicy:
        return cls(np.zeros((N_ATTACKER_ACTIONS, n_zones + 3)), n_zones)

    def probs_from_features(self, phi: np.ndarray, cls: np.ndarray) -> np.ndarray:
        return masked_softmax(phi @ self.weights.T, LEGAL_MASK[cls])

    def probs(self, recon, intrusion, zone_belief) -> np.ndarray:
        recon, intrusion = np.asarray(recon), np.asarray(intrusion)
        return self.probs_from_features(features(recon, intrusion, zone_belief), recon + intrusion)

    def act(self, recon, intrusion, zone_belief, u):
        return sample_codes(self.probs(recon, intrusion, zone_belief), u)

    @classmethod
    def stacked(cls, members, pos):
        W = np.stack([m.weights for m in members])[pos]

        def act(recon, intrusion, zone_belief, u):
            recon, intrusion = np.asarray(recon), np.asarray(intrusion)
            logits = np.einsum("nf,naf->na", features(recon, intrusion, zone_belief), W)
            return sample_codes(masked_softmax(logits, LEGAL_MASK[recon + intrusion]), u)

        return act

    def stage(self) -> np.ndarray:
        r = np.array([b[0] for b in CLASS_BITS])
        i = np.array([b[1] for b in CLASS_BITS])
        return self.probs(r, i, np.tile(self.ref_belief, (3, 1)))

    def to_dict(self):
        return {
            "type": "linear_softmax_attacker",
            "features": feature_names(self.n_zones),
            "actions": ["null", "recon", "brute_force", "exploit"],
            "weights": [list(map(float, row)) for row in self.weights],
            "masking": MASK_VERSION,
            "ref_belief": list(map(float, self.ref_belief)),
        }

    @classmethod
    def from_dict(cls, d) -> LinearSoftmaxPolicy:
        if d.get("masking", MASK_VERSION) != MASK_VERSION:
            raise ValueError(f"unsupported masking rule {d['masking']!r}")
        n_zones = len(d["features"]) - 3
        return cls(np.array(d["weights"], dtype=float), n_zones, np.array(d["ref_belief"], dtype=float))


# --------------------------------------------------------------------------- PPO pieces


@dataclass
class RolloutBatch:
    phi: np.ndarray
    cls: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __post_init__(self):
        if len(self.actions) == 0:
            raise ValueError("empty rollout batch")


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantages for ``(T, E)`` arrays; the value after the last step is zero."""
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    nxt_v = np.zeros(rewards.shape[1:])
    running = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * nxt_v - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        nxt_v = values[t]
    return adv


def discounted_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def make_batch(policy: LinearSoftmaxPolicy, phi, cls, actions, rewards, gamma: float, lam: float) -> RolloutBatch:
    """Flatten ``(T, E)`` rollouts, fit the linear value baseline and compute normalized advantages."""
    T, E = actions.shape
    to_go = discounted_to_go(rewards, gamma)
    X = phi.reshape(T * E, -1)
    w_v, *_ = np.linalg.lstsq(X, to_go.ravel(), rcond=None)
    values = (X @ w_v).reshape(T, E)
    adv = gae(rewards, values, gamma, lam)
    ret = adv + values
    adv = adv.ravel()
    std = adv.std()
    adv = (adv - adv.mean()) / (std if std > 0 else 1.0)
    p = policy.probs_from_features(X, cls.ravel())
    a = actions.ravel()
    return RolloutBatch(X, cls.ravel(), a, np.log(p[np.arange(len(a)), a]), adv, ret.ravel())


def surrogate(weights: np.ndarray, batch: RolloutBatch, clip: float = 0.2, ent_coef: float = 1e-4) -> float:
    """Clipped surrogate objective plus entropy bonus (to be maximized)."""
    p = masked_softmax(batch.phi @ weights.T, LEGAL_MASK[batch.cls])
    n = len(batch.actions)
    ratio = np.exp(np.log(p[np.arange(n), batch.actions]) - batch.logp)
    A = batch.advantages
    obj = np.minimum(ratio * A, np.clip(ratio, 1 - clip, 1 + clip) * A)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    return float(obj.mean() + ent_coef * ent.mean())


def surrogate_grad(weights: np.ndarray, batch: RolloutBatch, clip: float = 0.2, ent_coef: float = 1e-4) -> np.ndarray:
    """Analytic gradient of :func:`surrogate`; the clipped branch passes no gradient."""
    p = masked_softmax(batch.phi @ weights.T, LEGAL_MASK[batch.cls])
    n = len(batch.actions)
    rows = np.arange(n)
    ratio = np.exp(np.log(p[rows, batch.actions]) - batch.logp)
    A = batch.advantages
    unclipped = ratio * A <= np.clip(ratio, 1 - clip, 1 + clip) * A
    onehot = np.zeros_like(p)
    onehot[rows, batch.actions] = 1.0
    g_logits = np.where(unclipped, ratio * A, 0.0)[:, None] * (onehot - p)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(p > 0, np.log(p), 0.0)
    H = -(p * logp).sum(axis=1, keepdims=True)
    g_logits += ent_coef * (-p * (logp + H))
    return g_logits.T @ batch.phi / n


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Ascent step."""
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return x + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class PpoParams:
    lr: float = 0.05
    batch_episodes: int = 64
    horizon: int | None = None
    clip: float = 0.2
    gae_lambda: float = 0.95
    ent_coef: float = 1e-4
    epochs: int = 4
    iterations: int = 20
    eval_episodes: int = 400


def _with_local(cfg: GameConfig, k: int, policy) -> CompositeStrategy:
    locals_ = [TableAttacker.static()] * cfg.n_nodes
    locals_[k] = policy
    return CompositeStrategy(locals_)


def attacker_best_response(
    defender,
    sub: NodeSubgame,
    cfg: GameConfig,
    model: ObservationModel,
    hyper: PpoParams = PpoParams(),
    rng: np.random.Generator | None = None,
    history: list | None = None,
) -> LinearSoftmaxPolicy:
    """Train against a fixed defender on one node subgame; return the best-evaluated policy.

    The attacker's reward is the negated node-local defender utility.
    ``history`` receives the evaluation return after each iteration.
    """
    rng = rng if rng is not None else np.random.default_rng()
    T = hyper.horizon or horizon_for(cfg.gamma)
    k = sub.index
    eval_seed = int(rng.integers(2**63))

    def evaluate(pol):
        b = run_episodes(
            cfg, model, defender, _with_local(cfg, k, pol), hyper.eval_episodes, T,
            np.random.default_rng(eval_seed), nodes=[k], mode="local", record=True,
        )
        return -float(b.returns.mean()), b.steps["bA"][:, :, 0].reshape(-1, cfg.n_zones).mean(axis=0)

    policy = LinearSoftmaxPolicy.uniform(cfg.n_zones)
    best_ret, ref = evaluate(policy)
    best = LinearSoftmaxPolicy(policy.weights.copy(), cfg.n_zones, ref)
    opt = Adam(hyper.lr)
    for it in range(hyper.iterations):
        b = run_episodes(
            cfg, model, defender, _with_local(cfg, k, policy), hyper.batch_episodes, T, rng,
            nodes=[k], mode="local", record=True,
        )
        st = b.steps
        recon, intr = st["recon"][:, :, 0], st["intrusion"][:, :, 0]
        phi = features(recon, intr, st["bA"][:, :, 0])
        batch = make_batch(policy, phi, recon + intr, st["a_A"][:, :, 0], -st["u"][:, :, 0], cfg.gamma, hyper.gae_lambda)
        W = policy.weights
        for _ in range(hyper.epochs):
            W = opt.step(W, surrogate_grad(W, batch, hyper.clip, hyper.ent_coef))
        policy = LinearSoftmaxPolicy(W, cfg.n_zones)
        ret, ref = evaluate(policy)
        if history is not None:
            history.append(ret)
        if ret > best_ret:
            best_ret = ret
            best = LinearSoftmaxPolicy(W.copy(), cfg.n_zones, ref)
        log.debug("node %s iteration %d return %.4f", sub.node, it, ret)
    return best


__all__ = [
    "Adam",
    "LinearSoftmaxPolicy",
    "PpoParams",
    "RolloutBatch",
    "attacker_best_response",
    "feature_names",
    "features",
    "gae",
    "make_batch",
    "masked_softmax",
    "static_strategies",
    "surrogate",
    "surrogate_grad",
]
