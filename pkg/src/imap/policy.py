"""Dual-advantage MAPPO: a centralized critic on the global advantage and
decentralized actors on per-agent local advantages."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .actors import Actor, make_actor
from .envs import EnvSpec
from .nn import Adam, Mlp, Params
from .rollout import FlatBatch, minibatches

logger = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    value_clip: float = 0.2
    entropy_coef: float = 0.01
    lr: float = 5e-4
    critic_lr: float = 5e-4
    epochs: int = 10
    minibatch: int = 256
    max_grad_norm: float = 10.0
    standardize: bool = True
    paper_literal_delta: bool = False

    def __post_init__(self):
        if self.clip <= 0 or self.value_clip <= 0:
            raise ValueError("clip ranges must be positive")
        if self.entropy_coef < 0:
            raise ValueError("entropy coefficient must be >= 0")
        for name in ("gamma", "gae_lambda"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


class PolicyBundle:
    """``n`` decentralized actors plus one critic over the joint observation."""

    def __init__(
        self,
        spec: EnvSpec,
        config: PpoConfig | None = None,
        hidden: tuple[int, ...] = (256, 256),
        rng: np.random.Generator | None = None,
    ):
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        self.config = config or PpoConfig()
        self.actors: list[Actor] = [
            make_actor(spec.obs_dims[i], spec.action_spaces[i], hidden, rng)
            for i in range(spec.n_agents)
        ]
        self.critic = Mlp((spec.joint_obs_dim, *hidden, 1), rng)
        c = self.config
        self.actor_opts = [
            Adam(a.parameters(), c.lr, max_grad_norm=c.max_grad_norm) for a in self.actors
        ]
        self.critic_opt = Adam({"critic": self.critic.params}, c.critic_lr, max_grad_norm=c.max_grad_norm)

    @property
    def n_agents(self) -> int:
        return self.spec.n_agents

    def parameters(self) -> Params:
        p: Params = {}
        for i, actor in enumerate(self.actors):
            for k, v in actor.parameters().items():
                p[f"actor{i}.{k}"] = v
        p["critic"] = self.critic.params
        return p

    def values(self, joint_obs) -> np.ndarray:
        return self.critic(np.atleast_2d(joint_obs))[:, 0]


@dataclass
class AdvantageTable:
    global_adv: np.ndarray  # (N,)
    local_adv: np.ndarray | None  # (N, n)
    returns: np.ndarray  # critic targets
    values: np.ndarray  # V_old(s_t)
    next_values: np.ndarray  # V_old(s_{t+1}), zero at terminals
    prop2_residual: float = float("nan")


# --- advantage estimation ---------------------------------------------------


def gae(deltas, gamma: float, lam: float, done=None) -> np.ndarray:
    """Backward recursion ``A_t = delta_t + gamma * lam * A_{t+1}``.

    ``done`` marks the last step of each trajectory in a flat batch; the
    recursion restarts after it.  Without ``done`` the input is one trajectory.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if done is None:
        done = np.zeros(len(deltas), dtype=bool)
        if len(deltas):
            done[-1] = True
    cont = gamma * lam * (~np.asarray(done, dtype=bool))
    adv = np.empty_like(deltas)
    running = np.zeros(deltas.shape[1:])
    for t in range(len(deltas) - 1, -1, -1):
        running = deltas[t] + cont[t] * running
        adv[t] = running
    return adv


def discounted_tail_counts(done, gamma: float, lam: float) -> np.ndarray:
    """``c_t = sum_{l=0}^{L-1-t} (gamma*lam)^l``: GAE of a constant unit delta."""
    return gae(np.ones(len(done)), gamma, lam, done)


def critic_values(critic: Mlp, batch: FlatBatch) -> tuple[np.ndarray, np.ndarray]:
    """``V(s_t)`` and ``V(s_{t+1})`` with terminal successors bootstrapped at 0."""
    v = critic(batch.joint_obs)[:, 0]
    v_next = critic(batch.next_joint_obs)[:, 0] * (~np.asarray(batch.done, dtype=bool))
    return v, v_next


def gae_global(
    rewards, values, next_values, done, gamma: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Global advantages and critic targets ``R_hat_t = A_t + V_old(s_t)``."""
    delta = np.asarray(rewards) + gamma * np.asarray(next_values) - np.asarray(values)
    adv = gae(delta, gamma, lam, done)
    return adv, adv + values


def local_delta(
    local_rewards, values, next_values, weights, gamma: float, uncorrected: bool = False
) -> np.ndarray:
    """Per-agent TD residuals, shape ``(N, n)``.

    The default splits the critic's TD term as ``(gamma V' - V) / (n w_i)`` so
    that ``sum_i w_i delta_i`` recovers the global residual minus the
    constant ``(1-gamma) * bias``.  ``uncorrected`` uses ``gamma (V' - V) / w_i``
    instead, for which that identity does not hold.
    """
    r = np.atleast_2d(np.asarray(local_rewards, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError(f"local advantages need positive mixer weights, got {w}")
    values = np.asarray(values)[:, None]
    next_values = np.asarray(next_values)[:, None]
    if uncorrected:
        return r + gamma / w * (next_values - values)
    return r + (gamma * next_values - values) / (len(w) * w)


def gae_local(
    local_rewards, values, next_values, done, weights, gamma, lam, uncorrected=False
) -> np.ndarray:
    deltas = local_delta(local_rewards, values, next_values, weights, gamma, uncorrected)
    return gae(deltas, gamma, lam, done)


def prop2_residual(
    global_adv, local_adv, weights, bias: float, done, gamma: float, lam: float
) -> float:
    """``max_t |A_tot - sum_i w_i A_i - c_t (1-gamma) bias|``."""
    c = discounted_tail_counts(done, gamma, lam)
    recon = np.asarray(local_adv) @ np.asarray(weights) + c * (1.0 - gamma) * bias
    return float(np.max(np.abs(np.asarray(global_adv) - recon))) if len(c) else 0.0


def check_prop2(model, critic: Mlp, trajectory, gamma=None, lam=0.95, uncorrected=False) -> float:
    """Residual of the global/local advantage decomposition on one trajectory."""
    gamma = model.gamma if gamma is None else gamma
    arrs = trajectory.arrays
    R, r = model.rewards(arrs)
    v, v_next = critic_values(critic, arrs)
    adv, _ = gae_global(R, v, v_next, arrs.done, gamma, lam)
    w = model.mixer.weights()
    loc = gae_local(r, v, v_next, arrs.done, w, gamma, lam, uncorrected)
    return prop2_residual(adv, loc, w, model.mixer.bias[0], arrs.done, gamma, lam)


def build_advantages(
    bundle: PolicyBundle,
    batch: FlatBatch,
    rewards: np.ndarray,
    local_rewards: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    bias: float = 0.0,
) -> AdvantageTable:
    c = bundle.config
    v, v_next = critic_values(bundle.critic, batch)
    adv, targets = gae_global(rewards, v, v_next, batch.done, c.gamma, c.gae_lambda)
    local = None
    residual = float("nan")
    if local_rewards is not None:
        local = gae_local(
            local_rewards, v, v_next, batch.done, weights, c.gamma, c.gae_lambda, c.paper_literal_delta
        )
        residual = prop2_residual(adv, local, weights, bias, batch.done, c.gamma, c.gae_lambda)
    return AdvantageTable(adv, local, targets, v, v_next, residual)


def standardize(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance along axis 0 (each column its own stream)."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        return x - x.mean(axis=0)
    return (x - x.mean(axis=0)) / (x.std(axis=0) + 1e-8)


# --- losses -----------------------------------------------------------------


@dataclass
class LossResult:
    loss: float
    grads: Params
    info: dict = field(default_factory=dict)


def clipped_surrogate(logp, old_logp, adv, clip: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``min(rho A, clip(rho) A)`` and its derivative w.r.t. ``logp``."""
    rho = np.exp(logp - old_logp)
    unclipped = rho * adv
    clipped = np.clip(rho, 1.0 - clip, 1.0 + clip) * adv
    take_unclipped = unclipped <= clipped
    surr = np.where(take_unclipped, unclipped, clipped)
    return surr, np.where(take_unclipped, unclipped, 0.0)


def _actor_terms(bundle, rows: FlatBatch, adv: np.ndarray, standardize_adv: bool) -> LossResult:
    c = bundle.config
    if standardize_adv:
        adv = standardize(adv)
    n_rows = len(rows)
    total = 0.0
    grads: Params = {}
    ents, clipfrac = [], []
    for i, actor in enumerate(bundle.actors):
        logp, ent, cache = actor.evaluate(rows.local_obs[i], rows.actions[i])
        old = rows.logp[:, i]
        if not (np.all(np.isfinite(logp)) and np.all(np.isfinite(old))):
            logger.warning("non-finite importance ratio for agent %d; minibatch skipped", i)
            zero = {
                f"actor{j}.{k}": np.zeros_like(v)
                for j, a in enumerate(bundle.actors)
                for k, v in a.parameters().items()
            }
            return LossResult(0.0, zero, {"skipped": 1})
        surr, d_surr = clipped_surrogate(logp, old, adv[:, i], c.clip)
        total += -surr.mean() - c.entropy_coef * ent.mean()
        g = actor.backward(cache, -d_surr / n_rows, np.full(n_rows, -c.entropy_coef / n_rows))
        for k, v in g.items():
            grads[f"actor{i}.{k}"] = v
        ents.append(ent.mean())
        clipfrac.append(np.mean(np.abs(np.exp(logp - old) - 1.0) > c.clip))
    return LossResult(
        float(total),
        grads,
        {"entropy": float(np.mean(ents)), "clip_fraction": float(np.mean(clipfrac)), "skipped": 0},
    )


def actor_loss_dual(bundle, rows: FlatBatch, local_adv, standardize_adv: bool | None = None) -> LossResult:
    """Clipped surrogate per agent on its own local advantage, minus entropy, summed."""
    local_adv = np.asarray(local_adv, dtype=np.float64)
    if local_adv.shape != (len(rows), bundle.n_agents):
        raise ValueError(f"local advantages must be (N, n), got {local_adv.shape}")
    std = bundle.config.standardize if standardize_adv is None else standardize_adv
    return _actor_terms(bundle, rows, local_adv, std)


def actor_loss_global(bundle, rows: FlatBatch, global_adv, standardize_adv: bool | None = None) -> LossResult:
    """Same surrogate with every agent sharing the global advantage."""
    global_adv = np.asarray(global_adv, dtype=np.float64).reshape(-1)
    std = bundle.config.standardize if standardize_adv is None else standardize_adv
    if std:
        global_adv = standardize(global_adv)
    shared = np.repeat(global_adv[:, None], bundle.n_agents, axis=1)
    return _actor_terms(bundle, rows, shared, False)


def critic_loss(bundle, joint_obs, targets, old_values) -> LossResult:
    """Mean of ``max((V - R)^2, (clip(V, V_old +- eps_v) - R)^2)``."""
    eps = bundle.config.value_clip
    out, tape = bundle.critic.record(np.atleast_2d(joint_obs))
    v = out[:, 0]
    diff = v - old_values
    inside = np.abs(diff) < eps
    v_clip = old_values + np.clip(diff, -eps, eps)
    a = (v - targets) ** 2
    b = (v_clip - targets) ** 2
    take_a = a >= b
    loss = np.where(take_a, a, b)
    n = len(v)
    d_v = np.where(take_a, 2.0 * (v - targets), 2.0 * (v_clip - targets) * inside) / n
    grads = {"critic": bundle.critic.backward(tape, d_v[:, None])}
    return LossResult(float(loss.mean()), grads)


# --- gradient decomposition across agents -----------------------------------


def prop3_exact(
    state_weights: np.ndarray,
    probs: Sequence[np.ndarray],
    scores: Sequence[np.ndarray],
    local_adv: Sequence[np.ndarray],
    weights,
    bias: float,
    gamma: float,
    c_state: np.ndarray | None = None,
) -> float:
    """Exact-expectation residual of the joint-vs-local policy-gradient identity.

    ``probs[i]`` is ``(S, m_i)``, ``scores[i]`` is ``(S, m_i, P_i)`` (gradient
    of ``log pi_i(a_i|s)``) and ``local_adv[i]`` is ``(S, m_i)``.  The global
    advantage is assembled as ``sum_i w_i A_i(s, a_i) + c_s (1-gamma) bias``
    and the joint gradient is enumerated over every joint action.
    """
    assert len(probs) == 2, "exact enumeration is implemented for two agents"
    w = np.asarray(weights, dtype=np.float64)
    S = len(state_weights)
    c_state = np.ones(S) if c_state is None else np.asarray(c_state)
    const = c_state * (1.0 - gamma) * bias
    p1, p2 = probs
    a_tot = (
        w[0] * local_adv[0][:, :, None] + w[1] * local_adv[1][:, None, :] + const[:, None, None]
    )
    joint = p1[:, :, None] * p2[:, None, :] * state_weights[:, None, None]
    g_joint = [
        np.einsum("sab,sap,sab->p", joint, scores[0], a_tot),
        np.einsum("sab,sbp,sab->p", joint, scores[1], a_tot),
    ]
    decomposed = []
    for i in range(2):
        p_s = probs[i] * state_weights[:, None]
        g_local = np.einsum("sa,sap,sa->p", p_s, scores[i], local_adv[i])
        g_score = np.einsum("sa,sap,s->p", p_s, scores[i], const)
        decomposed.append(w[i] * g_local + g_score)
    diff = np.concatenate([g_joint[i] - decomposed[i] for i in range(2)])
    return float(np.linalg.norm(diff))


def prop3_empirical(
    scores: Sequence[np.ndarray],
    global_adv: np.ndarray,
    local_adv: np.ndarray,
    weights,
    const: np.ndarray,
) -> dict:
    """Finite-sample form of the gradient identity.

    On samples the joint gradient block of agent ``i`` equals
    ``w_i g_local_i`` plus the cross-agent terms ``sum_{j != i} w_j E[score_i A_j]``
    and the constant-offset score term.  Both vanish only in expectation, so
    they are included explicitly; ``residual`` is then pure round-off and
    ``score_term`` / ``cross_term`` report the sample means that should
    shrink as samples grow.
    """
    w = np.asarray(weights, dtype=np.float64)
    local_adv = np.asarray(local_adv)
    n = len(scores)
    diffs, score_terms, cross_terms = [], [], []
    for i in range(n):
        sc = scores[i]
        g_joint = sc.T @ global_adv / len(sc)
        g_local = sc.T @ local_adv[:, i] / len(sc)
        others = local_adv @ w - w[i] * local_adv[:, i]
        g_cross = sc.T @ others / len(sc)
        g_score = sc.T @ const / len(sc)
        diffs.append(g_joint - (w[i] * g_local + g_cross + g_score))
        score_terms.append(g_score)
        cross_terms.append(g_cross)
    return {
        "residual": float(np.linalg.norm(np.concatenate(diffs))),
        "score_term": np.concatenate(score_terms),
        "cross_term": np.concatenate(cross_terms),
    }


def check_prop3(bundle: PolicyBundle, rows: FlatBatch, advantages: AdvantageTable, mixer) -> float:
    """Finite-sample gradient-identity residual for the bundle's actors on ``rows``."""
    if advantages.local_adv is None:
        raise ValueError("check_prop3 needs local advantages")
    scores = [actor.score(rows.local_obs[i], rows.actions[i]) for i, actor in enumerate(bundle.actors)]
    c = discounted_tail_counts(rows.done, bundle.config.gamma, bundle.config.gae_lambda)
    const = c * (1.0 - bundle.config.gamma) * mixer.bias[0]
    res = prop3_empirical(scores, advantages.global_adv, advantages.local_adv, mixer.weights(), const)
    return res["residual"]


# --- one PPO iteration --------------------------------------------------------


def _take_rows(batch: FlatBatch, idx: np.ndarray) -> FlatBatch:
    return FlatBatch(
        joint_obs=batch.joint_obs[idx],
        next_joint_obs=batch.next_joint_obs[idx],
        local_obs=[o[idx] for o in batch.local_obs],
        next_local_obs=[o[idx] for o in batch.next_local_obs],
        actions=[a[idx] for a in batch.actions],
        done=batch.done[idx],
        t=batch.t[idx],
        logp=batch.logp[idx],
        traj_index=batch.traj_index[idx],
        offsets=np.array([0, len(idx)]),
    )


def train_iteration(
    bundle: PolicyBundle,
    batch: FlatBatch,
    rewards: np.ndarray,
    rng: np.random.Generator,
    local_rewards: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    bias: float = 0.0,
    zero_advantages: bool = False,
) -> tuple[AdvantageTable, dict]:
    """PPO epochs on one batch.

    With ``local_rewards`` the actors follow their local advantages (dual
    mode); otherwise every actor follows the global advantage.  The critic
    always regresses on global GAE targets computed with the pre-update
    critic.  ``zero_advantages`` drops the surrogate and keeps only the
    entropy bonus (diagnostic).
    """
    c = bundle.config
    table = build_advantages(bundle, batch, rewards, local_rewards, weights, bias)
    dual = table.local_adv is not None
    if dual:
        actor_adv = standardize(table.local_adv) if c.standardize else table.local_adv
    else:
        g = standardize(table.global_adv) if c.standardize else table.global_adv
        actor_adv = np.repeat(g[:, None], bundle.n_agents, axis=1)
    if zero_advantages:
        actor_adv = np.zeros_like(actor_adv)

    stats = {"actor_loss": [], "critic_loss": [], "entropy": [], "clip_fraction": [], "skipped": 0}
    for _ in range(c.epochs):
        for idx in minibatches(len(batch), c.minibatch, rng):
            rows = _take_rows(batch, idx)
            res = _actor_terms(bundle, rows, actor_adv[idx], False)
            if res.info.get("skipped"):
                stats["skipped"] += 1
                continue
            for i, opt in enumerate(bundle.actor_opts):
                opt.step({k.split(".", 1)[1]: v for k, v in res.grads.items() if k.startswith(f"actor{i}.")})
            crit = critic_loss(bundle, rows.joint_obs, table.returns[idx], table.values[idx])
            bundle.critic_opt.step(crit.grads)
            stats["actor_loss"].append(res.loss)
            stats["critic_loss"].append(crit.loss)
            stats["entropy"].append(res.info["entropy"])
            stats["clip_fraction"].append(res.info["clip_fraction"])
    metrics = {
        k: (float(np.mean(v)) if v else float("nan")) if isinstance(v, list) else v
        for k, v in stats.items()
    }
    metrics["prop2_residual"] = table.prop2_residual
    return table, metrics
