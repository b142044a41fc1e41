"""Implicit reward learning from trajectory preferences.

Local per-agent Q and V approximators are combined by one shared linear
mixer into ``Q_tot`` and ``V_tot``.  The transition reward is never regressed
directly: it is read off ``Q_tot`` through the inverse soft Bellman operator
``R(s, a) = Q_tot(s, a) - gamma * V_tot(s')``, scored against preferences
with a Bradley-Terry likelihood, while an extreme-value (Gumbel) regression
keeps ``V_tot`` at the soft maximum of ``Q_tot``.

Terminal successors zero the *local* values, so ``V_tot`` of a terminal
state equals the mixer bias.  This keeps
``R = sum_i w_i r_i + (1 - gamma) * bias`` exact on every transition.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .envs import EnvSpec, Trajectory
from .nn import Adam, Mlp, Params
from .preference import PreferenceBuffer, PreferencePair
from .rollout import FlatBatch, flatten

logger = logging.getLogger(__name__)

MIXER_FLOOR = 1e-3
EXP_CLAMP = 50.0


class RewardModelDivergence(RuntimeError):
    pass


class TransitionArrays(Protocol):
    local_obs: list[np.ndarray]
    next_local_obs: list[np.ndarray]
    actions: list[np.ndarray]
    done: np.ndarray
    t: np.ndarray


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


class LinearMixer:
    """``M_w[x] = sum_i w_i x_i + bias`` with ``w_i = softplus(raw_i) + 1e-3``."""

    def __init__(self, n_agents: int, raw: np.ndarray | None = None, bias: float = 0.0):
        self.raw = np.zeros(n_agents) if raw is None else np.array(raw, dtype=np.float64)
        self.bias = np.array([float(bias)])

    @classmethod
    def from_effective(cls, weights: Sequence[float], bias: float = 0.0) -> "LinearMixer":
        w = np.asarray(weights, dtype=np.float64)
        bad = [f"w_{i + 1}={x:g}" for i, x in enumerate(w) if not x > MIXER_FLOOR]
        if bad:
            raise ValueError(f"mixer weights must exceed {MIXER_FLOOR}: {', '.join(bad)}")
        # inverse softplus
        raw = np.log(np.expm1(w - MIXER_FLOOR))
        return cls(len(w), raw, bias)

    @property
    def n_agents(self) -> int:
        return self.raw.size

    def weights(self) -> np.ndarray:
        return softplus(self.raw) + MIXER_FLOOR

    def parameters(self) -> Params:
        return {"mixer.raw": self.raw, "mixer.bias": self.bias}

    def __call__(self, local: np.ndarray) -> np.ndarray:
        return local @ self.weights() + self.bias[0]


@dataclass
class PhiRegularizer:
    """Concave penalty ``phi(x) = -coef * x**2`` on discounted implicit rewards."""

    coef: float = 0.5

    def __post_init__(self):
        if self.coef < 0:
            raise ValueError("regularizer coefficient must be >= 0 for concavity")

    def __call__(self, x):
        return -self.coef * np.square(x)

    def grad(self, x):
        return -2.0 * self.coef * np.asarray(x)


class ImplicitRewardModel:
    def __init__(
        self,
        spec: EnvSpec,
        hidden: tuple[int, ...] = (256, 256),
        beta: float = 1.0,
        gamma: float = 0.99,
        rng: np.random.Generator | None = None,
    ):
        if beta <= 0:
            raise ValueError("temperature beta must be positive")
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        self.beta = beta
        self.gamma = gamma
        self.local_q = [
            Mlp((spec.obs_dims[i] + spec.action_spaces[i].feature_dim, *hidden, 1), rng)
            for i in range(spec.n_agents)
        ]
        self.local_v = [Mlp((spec.obs_dims[i], *hidden, 1), rng) for i in range(spec.n_agents)]
        self.mixer = LinearMixer(spec.n_agents)

    @property
    def n_agents(self) -> int:
        return self.spec.n_agents

    def q_parameters(self) -> Params:
        p = {f"q{i}": net.params for i, net in enumerate(self.local_q)}
        p.update(self.mixer.parameters())
        return p

    def v_parameters(self) -> Params:
        return {f"v{i}": net.params for i, net in enumerate(self.local_v)}

    def parameters(self) -> Params:
        return {**self.q_parameters(), **self.v_parameters()}

    # -- local values -------------------------------------------------------

    def q_input(self, i: int, obs, actions) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        feats = self.spec.action_spaces[i].features(np.atleast_1d(actions))
        return np.concatenate([obs, feats.reshape(len(obs), -1)], axis=1)

    def local_q_values(self, local_obs: Sequence, actions: Sequence) -> np.ndarray:
        """``(N, n)`` matrix of ``q_i(s_i, a_i)``."""
        return np.stack(
            [
                self.local_q[i](self.q_input(i, local_obs[i], actions[i]))[:, 0]
                for i in range(self.n_agents)
            ],
            axis=1,
        )

    def local_v_values(self, local_obs: Sequence) -> np.ndarray:
        return np.stack(
            [
                self.local_v[i](np.atleast_2d(local_obs[i]))[:, 0]
                for i in range(self.n_agents)
            ],
            axis=1,
        )

    # -- global values and rewards -----------------------------------------

    def q_tot(self, local_obs: Sequence, actions: Sequence) -> np.ndarray:
        return self.mixer(self.local_q_values(local_obs, actions))

    def v_tot(self, local_obs: Sequence) -> np.ndarray:
        return self.mixer(self.local_v_values(local_obs))

    def rewards(self, batch: TransitionArrays) -> tuple[np.ndarray, np.ndarray]:
        """Global implicit rewards ``(N,)`` and local rewards ``(N, n)`` for a batch."""
        q = self.local_q_values(batch.local_obs, batch.actions)
        v_next = self.local_v_values(batch.next_local_obs)
        v_next = v_next * (~np.asarray(batch.done, dtype=bool))[:, None]
        local = q - self.gamma * v_next
        glob = self.mixer(q) - self.gamma * self.mixer(v_next)
        return glob, local

    def implicit_reward_global(self, transition) -> float:
        q = self.q_tot([o[None] for o in transition.local_obs], [[a] for a in transition.actions])
        if transition.done:
            v_next = self.mixer.bias[0]
        else:
            v_next = self.v_tot([o[None] for o in transition.next_local_obs])[0]
        return float(q[0] - self.gamma * v_next)

    def implicit_reward_local(
        self, i: int, local_obs_i, action_i, next_local_obs_i, done: bool
    ) -> float:
        if not 0 <= i < self.n_agents:
            raise IndexError(f"agent index {i} out of range")
        q = self.local_q[i](self.q_input(i, local_obs_i, [action_i]))[0, 0]
        v = 0.0 if done else self.local_v[i](np.atleast_2d(next_local_obs_i))[0, 0]
        return float(q - self.gamma * v)

    def trajectory_score(self, traj: Trajectory) -> float:
        """``sum_t gamma^t R(s_t, a_t)`` under the implicit reward."""
        r, _ = self.rewards(traj.arrays)
        return float(np.sum(self.gamma ** traj.arrays.t * r))

    def trajectory_scores(self, trajs: Sequence[Trajectory]) -> np.ndarray:
        flat = flatten(trajs)
        r, _ = self.rewards(flat)
        return np.bincount(flat.traj_index, self.gamma**flat.t * r, minlength=len(trajs))


# --- losses -----------------------------------------------------------------


@dataclass
class LossResult:
    loss: float
    grads: Params
    info: dict = field(default_factory=dict)


def _mixer_grads(mixer: LinearMixer, d_w: np.ndarray, d_bias: float) -> Params:
    return {"mixer.raw": d_w * sigmoid(mixer.raw), "mixer.bias": np.array([d_bias])}


@dataclass
class PairBatch:
    """Preference pairs resolved to row indices over their distinct trajectories."""

    trajectories: list[Trajectory]
    flat: FlatBatch
    win: np.ndarray
    lose: np.ndarray
    uses: np.ndarray  # how many pairs each trajectory appears in

    def __len__(self) -> int:
        return len(self.win)


def index_pairs(pairs: Sequence[PreferencePair]) -> PairBatch:
    index: dict[int, int] = {}
    trajs: list[Trajectory] = []
    for p in pairs:
        for tr in (p.winner, p.loser):
            if tr.uid not in index:
                index[tr.uid] = len(trajs)
                trajs.append(tr)
    win = np.array([index[p.winner.uid] for p in pairs], dtype=np.int64)
    lose = np.array([index[p.loser.uid] for p in pairs], dtype=np.int64)
    uses = np.bincount(np.concatenate([win, lose]), minlength=len(trajs)).astype(np.float64)
    return PairBatch(trajs, flatten(trajs), win, lose, uses)


def preference_loss(
    model: ImplicitRewardModel,
    pairs: Sequence[PreferencePair] | PairBatch,
    regularizer: PhiRegularizer | None = None,
) -> LossResult:
    """Mean Bradley-Terry negative log-likelihood of ``pairs`` plus the phi penalty.

    Scores are ``S(traj) = sum_t gamma^t R(s_t, a_t)`` with ``R`` the implicit
    reward.  The penalty ``-phi(gamma^t R)`` is summed over every transition of
    both trajectories of each pair, then divided by the pair count like the
    likelihood term.  Gradients cover every parameter block; the trainer
    applies only the Q and mixer blocks in this step.
    """
    regularizer = regularizer or PhiRegularizer(0.0)
    if not isinstance(pairs, PairBatch):
        if not pairs:
            zeros = {k: np.zeros_like(v) for k, v in model.parameters().items()}
            return LossResult(0.0, zeros, {"pairs": 0})
        pairs = index_pairs(pairs)
    win, lose, flat = pairs.win, pairs.lose, pairs.flat
    n_pairs = len(pairs)
    n_traj = len(pairs.trajectories)
    uses = pairs.uses
    gamma, n = model.gamma, model.n_agents
    live = (~flat.done).astype(np.float64)
    w = model.mixer.weights()
    bias = model.mixer.bias[0]

    q_loc, q_tapes, v_loc, v_tapes = [], [], [], []
    for i in range(n):
        out, tape = model.local_q[i].record(model.q_input(i, flat.local_obs[i], flat.actions[i]))
        q_loc.append(out[:, 0])
        q_tapes.append(tape)
        out, tape = model.local_v[i].record(flat.next_local_obs[i])
        v_loc.append(out[:, 0] * live)
        v_tapes.append(tape)
    q_loc = np.stack(q_loc, axis=1)
    v_loc = np.stack(v_loc, axis=1)
    reward = q_loc @ w + bias - gamma * (v_loc @ w + bias)
    disc = gamma ** flat.t.astype(np.float64)
    score = np.bincount(flat.traj_index, disc * reward, minlength=n_traj)

    margin = score[win] - score[lose]
    nll = np.logaddexp(0.0, -margin)
    x = disc * reward
    penalty = -np.sum(uses[flat.traj_index] * regularizer(x))
    loss = (np.sum(nll) + penalty) / n_pairs

    d_margin = -sigmoid(-margin) / n_pairs
    d_score = np.bincount(win, d_margin, minlength=n_traj) - np.bincount(
        lose, d_margin, minlength=n_traj
    )
    d_reward = d_score[flat.traj_index] * disc
    d_reward -= uses[flat.traj_index] * regularizer.grad(x) * disc / n_pairs
    d_vnext = -gamma * d_reward

    grads: Params = {}
    for i in range(n):
        grads[f"q{i}"] = model.local_q[i].backward(q_tapes[i], (d_reward * w[i])[:, None])
        grads[f"v{i}"] = model.local_v[i].backward(v_tapes[i], (d_vnext * w[i] * live)[:, None])
    d_w = d_reward @ q_loc + d_vnext @ v_loc
    d_bias = float(np.sum(d_reward) + np.sum(d_vnext))
    grads.update(_mixer_grads(model.mixer, d_w, d_bias))
    accuracy = float(np.mean(margin > 0))
    return LossResult(
        float(loss),
        grads,
        {"pairs": n_pairs, "nll": float(np.mean(nll)), "accuracy": accuracy},
    )


def extreme_v_loss(
    model: ImplicitRewardModel,
    batch: TransitionArrays,
    log_behavior: np.ndarray | None = None,
) -> LossResult:
    """Mean of ``exp(d) - d - 1`` with ``d = (M_w[q] - M_w[v]) / beta``; V gradients only.

    Its minimiser is ``V_tot(s) = beta * log E_mu[exp(Q_tot(s, a) / beta)]``
    under the data's action distribution ``mu``.  Passing the behaviour
    log-probabilities ``log mu(a|s)`` shifts ``d`` by ``-log mu`` so the
    minimiser becomes the log-sum-exp over joint actions instead.

    Arguments above ``EXP_CLAMP`` continue linearly (value and slope match at
    the clamp) and are reported through ``info["saturated"]``.
    """
    q_loc = model.local_q_values(batch.local_obs, batch.actions)
    q = model.mixer(q_loc)
    v_loc, tapes = [], []
    for i in range(model.n_agents):
        out, tape = model.local_v[i].record(batch.local_obs[i])
        v_loc.append(out[:, 0])
        tapes.append(tape)
    v = model.mixer(np.stack(v_loc, axis=1))
    d = (q - v) / model.beta
    if log_behavior is not None:
        d = d - np.asarray(log_behavior, dtype=np.float64)
    n = len(d)
    sat = d > EXP_CLAMP
    em1 = np.expm1(np.minimum(d, EXP_CLAMP))
    # expm1 keeps the small-gap regime accurate; the term is convex with minimum 0
    per = np.where(sat, (em1 + 1.0) * (1.0 + d - EXP_CLAMP) - d - 1.0, em1 - d)
    loss = float(np.mean(np.maximum(per, 0.0)))
    d_d = em1 / n
    d_v = -d_d / model.beta
    w = model.mixer.weights()
    grads = {
        f"v{i}": model.local_v[i].backward(tapes[i], (d_v * w[i])[:, None])
        for i in range(model.n_agents)
    }
    return LossResult(loss, grads, {"saturated": int(sat.sum()), "mean_gap": float(np.mean(d))})


# --- training ---------------------------------------------------------------


@dataclass
class RewardTrainConfig:
    lr: float = 5e-4
    pref_batch: int = 64
    transition_batch: int = 256
    reg_coef: float = 0.5
    behavior_correction: bool = True
    divergence_threshold: float = 1e6


class RewardModelTrainer:
    """Alternates one preference step (Q nets + mixer) with one extreme-V step (V nets)."""

    def __init__(self, model: ImplicitRewardModel, config: RewardTrainConfig | None = None):
        self.model = model
        self.config = config or RewardTrainConfig()
        self.regularizer = PhiRegularizer(self.config.reg_coef)
        self.q_opt = Adam(model.q_parameters(), self.config.lr)
        self.v_opt = Adam(model.v_parameters(), self.config.lr)

    def preference_step(self, pairs: Sequence[PreferencePair] | PairBatch) -> LossResult:
        res = preference_loss(self.model, pairs, self.regularizer)
        self._guard("preference", res.loss)
        self.q_opt.step({k: res.grads[k] for k in self.q_opt.params})
        return res

    def extreme_v_step(self, batch: TransitionArrays, log_behavior=None) -> LossResult:
        res = extreme_v_loss(self.model, batch, log_behavior)
        self._guard("extreme-V", res.loss)
        self.v_opt.step(res.grads)
        return res

    def _guard(self, name: str, loss: float) -> None:
        if not np.isfinite(loss) or loss > self.config.divergence_threshold:
            raise RewardModelDivergence(
                f"{name} loss {loss:.4g} exceeds {self.config.divergence_threshold:g}; "
                f"mixer weights {self.model.mixer.weights()}, bias {self.model.mixer.bias[0]:.4g}"
            )

    def train(
        self,
        buffer: PreferenceBuffer | Sequence[PreferencePair],
        transitions: FlatBatch,
        steps: int,
        rng: np.random.Generator,
        log_behavior: np.ndarray | None = None,
    ) -> tuple[list[float], list[float]]:
        """Run ``steps`` alternating updates; returns the two loss traces.

        When ``log_behavior`` is None and behaviour correction is on, the
        joint log-probability stored with each transition is used.
        """
        if steps == 0:
            return [], []
        if len(buffer) == 0 or len(transitions) == 0:
            raise ValueError("reward-model training needs preferences and transitions")
        if log_behavior is None and self.config.behavior_correction:
            lp = getattr(transitions, "logp", None)
            if lp is not None and np.all(np.isfinite(lp)):
                log_behavior = lp.sum(axis=1)
        pairs = list(buffer)
        pref_trace, ev_trace = [], []
        for _ in range(steps):
            if len(pairs) > self.config.pref_batch:
                idx = rng.choice(len(pairs), size=self.config.pref_batch, replace=False)
                mb = [pairs[k] for k in np.sort(idx)]
            else:
                mb = pairs
            pref_trace.append(self.preference_step(mb).loss)
            rows = _sample_rows(len(transitions), self.config.transition_batch, rng)
            sub = _take(transitions, rows)
            lb = None if log_behavior is None else log_behavior[rows]
            ev_trace.append(self.extreme_v_step(sub, lb).loss)
        return pref_trace, ev_trace


def train_reward_model(
    model: ImplicitRewardModel,
    preference_buffer,
    transition_buffer: FlatBatch,
    steps: int,
    lr: float = 5e-4,
    seed: int = 0,
    **config,
) -> tuple[ImplicitRewardModel, list[float], list[float]]:
    trainer = RewardModelTrainer(model, RewardTrainConfig(lr=lr, **config))
    pref, ev = trainer.train(
        preference_buffer, transition_buffer, steps, np.random.default_rng(seed)
    )
    return model, pref, ev


def _sample_rows(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if n <= k:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


@dataclass
class _Rows:
    local_obs: list[np.ndarray]
    next_local_obs: list[np.ndarray]
    actions: list[np.ndarray]
    done: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.done)


def _take(batch: TransitionArrays, rows: np.ndarray) -> _Rows:
    return _Rows(
        local_obs=[o[rows] for o in batch.local_obs],
        next_local_obs=[o[rows] for o in batch.next_local_obs],
        actions=[a[rows] for a in batch.actions],
        done=np.asarray(batch.done)[rows],
        t=np.asarray(batch.t)[rows],
    )
