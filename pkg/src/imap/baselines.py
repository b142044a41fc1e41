"""Comparison algorithms: sparse-reward MAPPO, supervised-reward MAPPO and
online inverse preference learning with weighted behaviour cloning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .actors import CategoricalActor, make_actor
from .envs import EnvSpec, Trajectory
from .nn import Adam, Mlp, Params
from .preference import PreferencePair
from .reward_model import ImplicitRewardModel, sigmoid
from .rollout import FlatBatch, flatten

BASELINES = ("sparse_mappo", "sl_mappo", "online_ipl")
WEIGHT_CLAMP = 10.0


def sparse_mappo_rewards(trajectory: Trajectory) -> np.ndarray:
    """Zeros except the final step, which carries the episodic return."""
    r = np.zeros(len(trajectory))
    if len(trajectory):
        r[-1] = trajectory.episodic_return or 0.0
    return r


def sparse_rewards_flat(batch: FlatBatch, returns: Sequence[float]) -> np.ndarray:
    r = np.zeros(len(batch))
    r[batch.offsets[1:] - 1] = np.asarray(returns, dtype=np.float64)
    return r


@dataclass
class LossResult:
    loss: float
    grads: Params
    info: dict = field(default_factory=dict)


class SupervisedRewardNet:
    """Explicit reward ``R_psi(joint_obs, joint_action)`` regressed from preferences."""

    def __init__(
        self,
        spec: EnvSpec,
        hidden: tuple[int, ...] = (256, 256),
        gamma: float = 0.99,
        rng: np.random.Generator | None = None,
    ):
        self.spec = spec
        self.gamma = gamma
        act_dim = sum(s.feature_dim for s in spec.action_spaces)
        self.net = Mlp((spec.joint_obs_dim + act_dim, *hidden, 1), rng or np.random.default_rng(0))

    def parameters(self) -> Params:
        return {"net": self.net.params}

    def inputs(self, batch) -> np.ndarray:
        feats = [
            space.features(batch.actions[i]).reshape(len(batch.joint_obs), -1)
            for i, space in enumerate(self.spec.action_spaces)
        ]
        return np.concatenate([batch.joint_obs, *feats], axis=1)

    def rewards(self, batch) -> np.ndarray:
        return self.net(self.inputs(batch))[:, 0]


def sl_reward_loss(net: SupervisedRewardNet, pairs: Sequence[PreferencePair]) -> LossResult:
    """Mean cross-entropy of ``logistic(S(winner) - S(loser))`` against label 1.

    Pairs are stored winner-first, so the label is always ``y = 1`` in the
    pair's own orientation.
    """
    if not pairs:
        return LossResult(0.0, {"net": np.zeros_like(net.net.params)}, {"pairs": 0})
    index: dict[int, int] = {}
    trajs: list[Trajectory] = []
    for p in pairs:
        for tr in (p.winner, p.loser):
            if tr.uid not in index:
                index[tr.uid] = len(trajs)
                trajs.append(tr)
    win = np.array([index[p.winner.uid] for p in pairs])
    lose = np.array([index[p.loser.uid] for p in pairs])
    flat = flatten(trajs)
    out, tape = net.net.record(net.inputs(flat))
    disc = net.gamma ** flat.t.astype(np.float64)
    score = np.bincount(flat.traj_index, disc * out[:, 0], minlength=len(trajs))
    margin = score[win] - score[lose]
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    d_margin = -sigmoid(-margin) / len(pairs)
    d_score = np.bincount(win, d_margin, minlength=len(trajs)) - np.bincount(
        lose, d_margin, minlength=len(trajs)
    )
    d_out = (d_score[flat.traj_index] * disc)[:, None]
    return LossResult(loss, {"net": net.net.backward(tape, d_out)}, {"pairs": len(pairs)})


def train_sl_reward(
    net: SupervisedRewardNet,
    opt: Adam,
    pairs: Sequence[PreferencePair],
    steps: int,
    batch: int,
    rng: np.random.Generator,
) -> list[float]:
    trace = []
    pairs = list(pairs)
    for _ in range(steps):
        if len(pairs) > batch:
            idx = np.sort(rng.choice(len(pairs), size=batch, replace=False))
            mb = [pairs[k] for k in idx]
        else:
            mb = pairs
        res = sl_reward_loss(net, mb)
        opt.step(res.grads)
        trace.append(res.loss)
    return trace


# --- weighted behaviour cloning ---------------------------------------------


@dataclass
class BcPolicySet:
    actors: list
    beta: float


def advantage_weights(model: ImplicitRewardModel, batch, beta: float | None = None) -> np.ndarray:
    """``exp((M[q](s,a) - M[v](s)) / beta)`` clamped to ``[e^-10, e^10]``.

    The mixer bias cancels in the difference, as does any constant added to
    both local streams through the mixer.
    """
    beta = model.beta if beta is None else beta
    if beta <= 0:
        raise ValueError("beta must be positive")
    q = model.local_q_values(batch.local_obs, batch.actions) @ model.mixer.weights()
    v = model.local_v_values(batch.local_obs) @ model.mixer.weights()
    return np.exp(np.clip((q - v) / beta, -WEIGHT_CLAMP, WEIGHT_CLAMP))


def bc_loss(actors: Sequence, batch, weights: np.ndarray) -> LossResult:
    """``-sum_t w_t log pi_i(a_i|o_i) / sum_t w_t``, summed over agents."""
    weights = np.asarray(weights, dtype=np.float64)
    total_w = weights.sum()
    if not np.isfinite(total_w) or total_w <= 0:
        raise ValueError("behaviour cloning needs at least one positive weight")
    coef = weights / total_w
    loss = 0.0
    grads: Params = {}
    for i, actor in enumerate(actors):
        logp, ent, cache = actor.evaluate(batch.local_obs[i], batch.actions[i])
        loss += -float(coef @ logp)
        for k, g in actor.backward(cache, -coef, np.zeros_like(coef)).items():
            grads[f"actor{i}.{k}"] = g
    return LossResult(loss, grads)


def online_ipl_extract(
    model: ImplicitRewardModel,
    buffer: FlatBatch,
    beta: float | None = None,
    steps: int = 200,
    lr: float = 5e-3,
    hidden: tuple[int, ...] = (256, 256),
    init: Sequence | None = None,
    rng: np.random.Generator | None = None,
) -> BcPolicySet:
    """Fit per-agent policies by advantage-weighted maximum likelihood on ``buffer``.

    ``init`` warm-starts from existing actors (updated in place); otherwise
    fresh actors are built.
    """
    if len(buffer) == 0:
        raise ValueError("online_ipl_extract needs a non-empty transition buffer")
    beta = model.beta if beta is None else beta
    weights = advantage_weights(model, buffer, beta)
    spec = model.spec
    rng = rng or np.random.default_rng(0)
    actors = list(init) if init is not None else [
        make_actor(spec.obs_dims[i], spec.action_spaces[i], hidden, rng) for i in range(spec.n_agents)
    ]
    opts = [Adam(a.parameters(), lr) for a in actors]
    for _ in range(steps):
        res = bc_loss(actors, buffer, weights)
        for i, opt in enumerate(opts):
            opt.step({k.split(".", 1)[1]: g for k, g in res.grads.items() if k.startswith(f"actor{i}.")})
    return BcPolicySet(actors, beta)


def weighted_empirical_policy(
    states: np.ndarray, actions: np.ndarray, weights: np.ndarray, n_states: int, n_actions: int
) -> np.ndarray:
    """Closed-form maximiser of the weighted log-likelihood for a tabular policy."""
    counts = np.zeros((n_states, n_actions))
    np.add.at(counts, (states, actions), weights)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        return np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / n_actions)


def tabular_actor(n_states: int, n_actions: int) -> CategoricalActor:
    """Softmax over a one-hot state: one logit per (state, action)."""
    actor = CategoricalActor(n_states, n_actions, hidden=(), rng=np.random.default_rng(0))
    actor.net.params[:] = 0.0
    return actor


def run_baseline(name: str, env: str, config=None, **overrides):
    """Run one of the comparison algorithms through the shared training loop."""
    if name not in BASELINES:
        raise ValueError(f"unknown baseline {name!r}; expected one of {', '.join(BASELINES)}")
    from .config import RunConfig
    from .runner import Runner

    cfg = config or RunConfig()
    cfg = cfg.replace(algo=name, env=env, **overrides)
    return Runner(cfg).run()
