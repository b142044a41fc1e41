"""Trajectory collection under frozen decentralized actors."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .actors import Actor
from .envs import Env, Trajectory

logger = logging.getLogger(__name__)


class RolloutError(RuntimeError):
    pass


@dataclass
class FlatBatch:
    """All transitions of a batch concatenated in trajectory order."""

    joint_obs: np.ndarray
    next_joint_obs: np.ndarray
    local_obs: list[np.ndarray]
    next_local_obs: list[np.ndarray]
    actions: list[np.ndarray]
    done: np.ndarray
    t: np.ndarray
    logp: np.ndarray  # (N, n_agents)
    traj_index: np.ndarray
    offsets: np.ndarray  # start row of every trajectory, plus N at the end

    def __len__(self) -> int:
        return len(self.done)


def flatten(trajectories: Sequence[Trajectory]) -> FlatBatch:
    arrs = [tr.arrays for tr in trajectories]
    n = len(arrs[0].local_obs)
    lengths = np.array([len(tr) for tr in trajectories])
    logp = [
        tr.logp if tr.logp is not None else np.full((len(tr), n), np.nan)
        for tr in trajectories
    ]
    return FlatBatch(
        joint_obs=np.concatenate([a.joint_obs for a in arrs]),
        next_joint_obs=np.concatenate([a.next_joint_obs for a in arrs]),
        local_obs=[np.concatenate([a.local_obs[i] for a in arrs]) for i in range(n)],
        next_local_obs=[np.concatenate([a.next_local_obs[i] for a in arrs]) for i in range(n)],
        actions=[np.concatenate([a.actions[i] for a in arrs]) for i in range(n)],
        done=np.concatenate([a.done for a in arrs]),
        t=np.concatenate([a.t for a in arrs]),
        logp=np.concatenate(logp),
        traj_index=np.repeat(np.arange(len(arrs)), lengths),
        offsets=np.concatenate([[0], np.cumsum(lengths)]),
    )


@dataclass
class RolloutBatch:
    trajectories: list[Trajectory]
    policy_version: int = 0

    @cached_property
    def flat(self) -> FlatBatch:
        if not self.trajectories:
            raise RolloutError("empty batch has no transitions")
        return flatten(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(tr) for tr in self.trajectories)

    @property
    def returns(self) -> np.ndarray:
        return np.array([tr.episodic_return for tr in self.trajectories], dtype=np.float64)

    def stored_logprob(self, t: int, i: int) -> float:
        """Behaviour log-prob of agent ``i`` at flat transition index ``t``."""
        flat = self.flat
        if not 0 <= t < len(flat) or not 0 <= i < flat.logp.shape[1]:
            raise IndexError(f"transition {t}, agent {i} out of range")
        return float(flat.logp[t, i])


def minibatches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index arrays that partition ``range(n)``."""
    perm = rng.permutation(n)
    return [perm[k : k + size] for k in range(0, n, max(size, 1))]


def _run_episodes(
    make_env: Callable[[], Env],
    actors: Sequence[Actor],
    n_episodes: int,
    rng: np.random.Generator,
    greedy: bool,
) -> list[Trajectory]:
    if n_episodes == 0:
        return []
    envs = [make_env() for _ in range(n_episodes)]
    horizon = envs[0].spec.horizon
    n = envs[0].spec.n_agents
    obs = []
    for k, env in enumerate(envs):
        seed = int(rng.integers(2**31 - 1))
        try:
            obs.append(env.reset(seed=seed)[1])
        except Exception as exc:
            raise RolloutError(f"episode {k}: reset(seed={seed}) failed: {exc}") from exc
    transitions: list[list] = [[] for _ in envs]
    logps: list[list] = [[] for _ in envs]
    returns: list[float | None] = [None] * n_episodes
    active = list(range(n_episodes))
    for _ in range(horizon):
        if not active:
            break
        acts, lps = [], []
        for i, actor in enumerate(actors):
            o = np.stack([obs[k][i] for k in active])
            if greedy:
                a = actor.mode(o)
                lp = actor.log_prob(o, a)
            else:
                a, lp = actor.sample(o, rng)
            acts.append(a)
            lps.append(lp)
        still = []
        for row, k in enumerate(active):
            joint_action = tuple(acts[i][row] for i in range(n))
            try:
                tr, ret = envs[k].step(joint_action)
            except Exception as exc:
                raise RolloutError(
                    f"episode {k} step {len(transitions[k])}: env.step{joint_action} failed: {exc}"
                ) from exc
            transitions[k].append(tr)
            logps[k].append([lps[i][row] for i in range(n)])
            obs[k] = tr.next_local_obs
            if tr.done:
                returns[k] = ret
            else:
                still.append(k)
        active = still
    out = []
    for k, env in enumerate(envs):
        truncated = k in active
        if truncated:
            # hit the horizon without the env flagging done: close the episode here
            last = transitions[k][-1]
            last.done = True
            returns[k] = float(getattr(env, "episodic_return", lambda: 0.0)())
        out.append(
            Trajectory(
                transitions[k],
                episodic_return=float(returns[k]),
                metadata=env.summary(),
                truncated=truncated,
                logp=np.array(logps[k], dtype=np.float64),
            )
        )
    return out


def collect(
    make_env: Callable[[], Env],
    actors: Sequence[Actor],
    episodes: int,
    seed: int,
    policy_version: int = 0,
    workers: int = 1,
    greedy: bool = False,
) -> RolloutBatch:
    """Run ``episodes`` complete episodes with actions sampled from ``actors``.

    Worker ``w`` plays a contiguous block of episodes with its own RNG stream
    spawned from ``seed``; results are concatenated in worker order so the
    batch does not depend on thread scheduling.
    """
    workers = max(1, min(workers, episodes)) if episodes else 1
    streams = np.random.SeedSequence(seed).spawn(workers)
    counts = [episodes // workers + (w < episodes % workers) for w in range(workers)]
    jobs = [(counts[w], np.random.default_rng(streams[w])) for w in range(workers)]
    if workers == 1:
        parts = [_run_episodes(make_env, actors, jobs[0][0], jobs[0][1], greedy)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(
                pool.map(lambda job: _run_episodes(make_env, actors, job[0], job[1], greedy), jobs)
            )
    trajectories = [tr for part in parts for tr in part]
    return RolloutBatch(trajectories, policy_version)
