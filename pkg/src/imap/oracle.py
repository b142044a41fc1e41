"""Brute-force verifiers on enumerable tabular MDPs.

Everything here is exact enumeration or backward dynamic programming; the
learned components are only ever compared against these references.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .envs import (
    EnumeratedTrajectory,
    TabularMDP,
    TabularMdpEnv,
    Trajectory,
    enumerate_trajectories,
    policy_as_probs,
    random_tabular_mdp,
)
from .preference import candidate_pairs, logistic, simulate_bt_labels
from .reward_model import (
    ImplicitRewardModel,
    RewardModelDivergence,
    RewardModelTrainer,
    RewardTrainConfig,
    extreme_v_loss,
    index_pairs,
)
from .rollout import flatten

logger = logging.getLogger(__name__)


# --- policy evaluation --------------------------------------------------------


def trajectory_return(mdp: TabularMDP, path: EnumeratedTrajectory, reward_table=None) -> float:
    reward = mdp.reward if reward_table is None else np.asarray(reward_table)
    return float(
        sum(mdp.gamma**t * reward[s, a1, a2] for t, (s, (a1, a2)) in enumerate(zip(path.states, path.actions)))
    )


def policy_value_exact(mdp: TabularMDP, policy, reward_table=None, shift: float = 0.0) -> float:
    """``J(pi) = sum_sigma P_pi(sigma) R(sigma)`` by trajectory enumeration.

    ``shift`` is added to every trajectory's return (a terminal bonus).
    """
    paths = enumerate_trajectories(mdp, policy)
    return float(sum(p.probability * (trajectory_return(mdp, p, reward_table) + shift) for p in paths))


def policy_value_dp(mdp: TabularMDP, policy, reward_table=None, shift: float = 0.0) -> float:
    """Same quantity by backward induction over time (independent reference)."""
    probs = policy_as_probs(mdp, policy)
    reward = mdp.reward if reward_table is None else np.asarray(reward_table)
    value = np.zeros(mdp.n_states)
    for _ in range(mdp.horizon):
        q = reward + mdp.gamma * np.einsum("sabn,n->sab", mdp.transition, value)
        value = np.einsum("sab,sab->s", probs, q)
    return float(mdp.initial @ value + shift)


def monte_carlo_value(mdp: TabularMDP, policy, episodes: int, seed: int) -> tuple[float, float]:
    """Sample mean and standard error of the return under ``policy``."""
    probs = policy_as_probs(mdp, policy)
    rng = np.random.default_rng(seed)
    m1, m2 = mdp.n_actions
    flat = probs.reshape(mdp.n_states, -1)
    s = rng.choice(mdp.n_states, size=episodes, p=mdp.initial)
    ret = np.zeros(episodes)
    for t in range(mdp.horizon):
        u = rng.random(episodes)[:, None]
        a = (u > np.cumsum(flat[s], axis=1)).sum(axis=1).clip(max=m1 * m2 - 1)
        a1, a2 = a // m2, a % m2
        ret += mdp.gamma**t * mdp.reward[s, a1, a2]
        cdf = np.cumsum(mdp.transition[s, a1, a2], axis=1)
        s = (rng.random(episodes)[:, None] > cdf).sum(axis=1).clip(max=mdp.n_states - 1)
    return float(ret.mean()), float(ret.std(ddof=1) / np.sqrt(episodes))


def deterministic_policies(mdp: TabularMDP):
    """Every stationary deterministic joint policy as an ``(S, 2)`` int table."""
    m1, m2 = mdp.n_actions
    joint = list(itertools.product(range(m1), range(m2)))
    for choice in itertools.product(joint, repeat=mdp.n_states):
        yield np.array(choice, dtype=np.int64)


def optimal_policy_set(values: np.ndarray, rtol: float = 1e-9) -> frozenset[int]:
    best = values.max()
    tol = rtol * max(1.0, abs(best))
    return frozenset(np.flatnonzero(values >= best - tol).tolist())


@dataclass
class Prop1Report:
    shift: float
    n_policies: int
    optimal_base: list[int]
    optimal_shifted: list[int]
    max_shift_error: float
    passed: bool

    def __bool__(self) -> bool:
        return self.passed


def check_prop1(mdp: TabularMDP, shift: float) -> Prop1Report:
    """Optimal deterministic policies are unchanged when every return moves by ``shift``."""
    policies = list(deterministic_policies(mdp))
    base = np.array([policy_value_exact(mdp, p) for p in policies])
    shifted = np.array([policy_value_exact(mdp, p, shift=shift) for p in policies])
    set_a = optimal_policy_set(base)
    set_b = optimal_policy_set(shifted)
    err = float(np.max(np.abs(shifted - base - shift)))
    return Prop1Report(
        shift=shift,
        n_policies=len(policies),
        optimal_base=sorted(set_a),
        optimal_shifted=sorted(set_b),
        max_shift_error=err,
        passed=set_a == set_b and err < 1e-9 * max(1.0, abs(shift)),
    )


# --- soft values ----------------------------------------------------------------


def joint_action_grid(mdp: TabularMDP) -> tuple[np.ndarray, np.ndarray]:
    m1, m2 = mdp.n_actions
    a1, a2 = np.meshgrid(np.arange(m1), np.arange(m2), indexing="ij")
    return a1.ravel(), a2.ravel()


def soft_value_gap(model: ImplicitRewardModel, env: TabularMdpEnv, t: int = 0) -> np.ndarray:
    """``V_tot(s) - beta * logsumexp_a(Q_tot(s, a) / beta)`` for every state."""
    mdp = env.mdp
    a1, a2 = joint_action_grid(mdp)
    k = len(a1)
    gaps = np.empty(mdp.n_states)
    for s in range(mdp.n_states):
        _, local = env.observe(s, t)
        obs = [np.repeat(o[None], k, axis=0) for o in local]
        q = model.q_tot(obs, [a1, a2])
        target = model.beta * np.logaddexp.reduce(q / model.beta)
        gaps[s] = model.v_tot([o[None] for o in local])[0] - target
    return gaps


def soft_value_oracle(model: ImplicitRewardModel, env: TabularMdpEnv) -> float:
    """``max_s |V_tot(s) - beta * log sum_a exp(Q_tot(s, a) / beta)|``."""
    return float(np.max(np.abs(soft_value_gap(model, env))))


def uniform_transition_batch(env: TabularMdpEnv, t: int = 0):
    """One transition per (state, joint action) with the uniform behaviour log-prob."""
    mdp = env.mdp
    a1, a2 = joint_action_grid(mdp)
    trs = []
    for s in range(mdp.n_states):
        for x, y in zip(a1, a2):
            s2 = int(np.argmax(mdp.transition[s, x, y]))
            trs.append(env.make_transition(s, (x, y), s2, t))
    flat = flatten([Trajectory([tr]) for tr in trs])
    log_mu = np.full(len(trs), -np.log(mdp.n_joint_actions))
    return flat, log_mu


def fit_soft_value(
    model: ImplicitRewardModel,
    env: TabularMdpEnv,
    steps: int = 2000,
    lr: float = 1e-2,
    final_lr: float = 1e-4,
) -> list[float]:
    """Extreme-V steps only (Q fixed) on uniform tabular data, geometric lr decay."""
    flat, log_mu = uniform_transition_batch(env)
    trainer = RewardModelTrainer(model, RewardTrainConfig(lr=lr))
    decay = (final_lr / lr) ** (1.0 / max(steps - 1, 1))
    trace = []
    for k in range(steps):
        res = extreme_v_loss(model, flat, log_mu)
        trainer.v_opt.step(res.grads, lr=lr * decay**k)
        trace.append(res.loss)
    return trace


# --- preference-consistency harness ------------------------------------------------------------


@dataclass
class TheoremOneConfig:
    hidden: tuple[int, ...] = (64, 64)
    steps: int = 3000
    lr: float = 3e-3
    final_lr: float = 1e-4
    reg_coef: float = 1e-4
    beta: float = 1.0
    n_heldout: int = 20_000
    exact_coverage: bool = False


@dataclass
class TheoremOneReport:
    n_pairs: int
    seed: int
    learned_returns: list[float] = field(default_factory=list)
    true_returns: list[float] = field(default_factory=list)
    shift: float = float("nan")
    max_deviation: float = float("nan")
    return_range: float = float("nan")
    deviation_ratio: float = float("nan")
    heldout_accuracy: float = float("nan")
    bayes_rate: float = float("nan")
    insufficient_data: bool = False
    failed: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def theorem1_fixture(seed: int = 0, gamma: float = 0.99) -> TabularMdpEnv:
    """4 states, 2 agents x 2 actions, horizon 3, additive reward, leader-driven moves."""
    mdp = random_tabular_mdp(
        seed,
        n_states=4,
        n_actions=(2, 2),
        horizon=3,
        gamma=gamma,
        additive_reward=True,
        reward_scale=2.0,
        leader_transitions=True,
    )
    return TabularMdpEnv(mdp, time_features=True)


def run_theorem1_harness(
    env: TabularMdpEnv,
    n_pairs: int,
    config: TheoremOneConfig | None = None,
    seed: int = 0,
) -> TheoremOneReport:
    """Fit the implicit reward model to Bradley-Terry labels on every trajectory pair.

    The learned trajectory score ``S`` should match the true return up to one
    constant; the report carries the centred deviation and its ratio to the
    true return range, plus held-out label accuracy against the Bayes rate.
    """
    config = config or TheoremOneConfig()
    mdp = env.mdp
    paths = enumerate_trajectories(mdp)
    trajs = [env.trajectory(p) for p in paths]
    true = np.array([p.ret for p in paths])
    report = TheoremOneReport(n_pairs=n_pairs, seed=seed, true_returns=true.tolist())
    report.return_range = float(true.max() - true.min())
    if n_pairs <= 0:
        report.insufficient_data = True
        return report

    rng = np.random.default_rng(seed)
    all_pairs = candidate_pairs(trajs, len(trajs) ** 2, rng)
    if config.exact_coverage:
        reps = max(1, n_pairs // len(all_pairs))
        cand = all_pairs * reps
    else:
        idx = rng.integers(len(all_pairs), size=n_pairs)
        cand = [all_pairs[k] for k in idx]
    truth = {tr.uid: r for tr, r in zip(trajs, true)}
    labelled = simulate_bt_labels(cand, int(rng.integers(2**31)), lambda tr: truth[tr.uid])

    model = ImplicitRewardModel(
        env.spec, config.hidden, beta=config.beta, gamma=mdp.gamma, rng=np.random.default_rng(seed + 1)
    )
    trainer = RewardModelTrainer(
        model, RewardTrainConfig(lr=config.lr, reg_coef=config.reg_coef, pref_batch=len(labelled))
    )
    batch = index_pairs(labelled)
    flat = flatten(trajs)
    log_mu = np.full(len(flat), -np.log(mdp.n_joint_actions))
    decay = (config.final_lr / config.lr) ** (1.0 / max(config.steps - 1, 1))
    try:
        for k in range(config.steps):
            lr = config.lr * decay**k
            trainer.q_opt.lr = trainer.v_opt.lr = lr
            trainer.preference_step(batch)
            trainer.extreme_v_step(flat, log_mu)
    except RewardModelDivergence as exc:
        report.failed = str(exc)
        return report

    learned = model.trajectory_scores(trajs)
    report.learned_returns = learned.tolist()
    report.shift = float(np.mean(learned - true))
    report.max_deviation = float(np.max(np.abs(learned - true - report.shift)))
    report.deviation_ratio = report.max_deviation / report.return_range

    held = [all_pairs[k] for k in rng.integers(len(all_pairs), size=config.n_heldout)]
    held_labels = simulate_bt_labels(held, int(rng.integers(2**31)), lambda tr: truth[tr.uid])
    score = {tr.uid: s for tr, s in zip(trajs, learned)}
    correct = [score[p.winner.uid] > score[p.loser.uid] for p in held_labels]
    report.heldout_accuracy = float(np.mean(correct))
    gaps = np.array([truth[a.uid] - truth[b.uid] for a, b in held])
    p = logistic(gaps)
    report.bayes_rate = float(np.mean(np.maximum(p, 1.0 - p)))
    return report


def bayes_rate(gaps) -> float:
    """Best achievable accuracy on BT labels with the given true-return gaps."""
    p = logistic(np.asarray(gaps, dtype=np.float64))
    return float(np.mean(np.maximum(p, 1.0 - p)))
