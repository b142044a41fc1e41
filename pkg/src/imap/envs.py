"""Sparse-reward cooperative environments and an enumerable tabular MDP.

No environment ever hands out a per-step reward.  ``step`` returns the
episodic return only on the transition that ends the episode.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Protocol, Sequence

import numpy as np


class InvalidAction(ValueError):
    pass


class EnumerationTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Discrete:
    n: int

    def contains(self, a) -> bool:
        return isinstance(a, (int, np.integer)) and 0 <= int(a) < self.n

    @property
    def feature_dim(self) -> int:
        return self.n

    def features(self, actions) -> np.ndarray:
        """One-hot rows for an array of action indices."""
        actions = np.asarray(actions, dtype=np.int64)
        return np.eye(self.n)[actions]


@dataclass(frozen=True)
class Box:
    dim: int
    low: float = -1.0
    high: float = 1.0

    def contains(self, a) -> bool:
        a = np.asarray(a, dtype=np.float64)
        return a.shape == (self.dim,) and bool(np.all(np.isfinite(a)))

    @property
    def feature_dim(self) -> int:
        return self.dim

    def features(self, actions) -> np.ndarray:
        return np.asarray(actions, dtype=np.float64).reshape(-1, self.dim)


ActionSpace = Discrete | Box


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    obs_dims: tuple[int, ...]
    joint_obs_dim: int
    action_spaces: tuple[ActionSpace, ...]
    horizon: int

    def __post_init__(self):
        if self.n_agents < 1 or self.horizon < 1:
            raise ValueError("n_agents and horizon must be positive")
        if len(self.obs_dims) != self.n_agents or len(self.action_spaces) != self.n_agents:
            raise ValueError("per-agent dims must match n_agents")
        if min(self.obs_dims) <= 0 or self.joint_obs_dim <= 0:
            raise ValueError("observation dims must be positive")

    @property
    def discrete(self) -> bool:
        return all(isinstance(s, Discrete) for s in self.action_spaces)


@dataclass
class Transition:
    joint_obs: np.ndarray
    local_obs: tuple[np.ndarray, ...]
    actions: tuple
    next_joint_obs: np.ndarray
    next_local_obs: tuple[np.ndarray, ...]
    done: bool
    t: int

    @property
    def joint_action(self) -> tuple:
        return self.actions


@dataclass
class TrajectoryArrays:
    """Stacked view of a trajectory, one row per step."""

    joint_obs: np.ndarray
    next_joint_obs: np.ndarray
    local_obs: list[np.ndarray]
    next_local_obs: list[np.ndarray]
    actions: list[np.ndarray]
    done: np.ndarray
    t: np.ndarray


_uid = itertools.count()


@dataclass(eq=False)
class Trajectory:
    transitions: list[Transition]
    episodic_return: float | None = None
    metadata: dict[str, Any] = field(default_factory=dict)
    truncated: bool = False
    logp: np.ndarray | None = None  # (length, n_agents) behaviour log-probs
    uid: int = field(default_factory=lambda: next(_uid))

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def complete(self) -> bool:
        return bool(self.transitions) and self.transitions[-1].done

    @cached_property
    def arrays(self) -> TrajectoryArrays:
        tr = self.transitions
        n = len(tr[0].local_obs)
        return TrajectoryArrays(
            joint_obs=np.stack([x.joint_obs for x in tr]),
            next_joint_obs=np.stack([x.next_joint_obs for x in tr]),
            local_obs=[np.stack([x.local_obs[i] for x in tr]) for i in range(n)],
            next_local_obs=[np.stack([x.next_local_obs[i] for x in tr]) for i in range(n)],
            actions=[np.array([x.actions[i] for x in tr]) for i in range(n)],
            done=np.array([x.done for x in tr], dtype=bool),
            t=np.array([x.t for x in tr], dtype=np.int64),
        )


class Env(Protocol):
    spec: EnvSpec

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, tuple[np.ndarray, ...]]: ...

    def step(self, joint_action: Sequence) -> tuple[Transition, float | None]: ...

    def summary(self) -> dict[str, Any]: ...


def _joint(local: Sequence[np.ndarray], t: int, horizon: int) -> np.ndarray:
    return np.concatenate([*local, [t / horizon]])


class _EpisodeMixin:
    """Bookkeeping shared by the built-in environments."""

    spec: EnvSpec

    def _check_actions(self, joint_action) -> tuple:
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        if len(joint_action) != self.spec.n_agents:
            raise InvalidAction(f"expected {self.spec.n_agents} actions, got {len(joint_action)}")
        for i, (a, space) in enumerate(zip(joint_action, self.spec.action_spaces)):
            if not space.contains(a):
                raise InvalidAction(f"agent {i}: action {a!r} outside {space}")
        return tuple(
            int(a) if isinstance(space, Discrete) else np.asarray(a, dtype=np.float64)
            for a, space in zip(joint_action, self.spec.action_spaces)
        )


class CoopMatrixGame(_EpisodeMixin):
    """Two agents replay a hidden per-step payoff matrix for ``horizon`` steps.

    Each agent only sees a one-hot step counter.  The episodic return is the
    (optionally discounted) sum of the joint payoffs and is revealed only on
    the final step.
    """

    def __init__(
        self,
        payoffs: np.ndarray | None = None,
        horizon: int = 5,
        n_actions: int = 3,
        payoff_seed: int = 0,
        discount: float = 1.0,
    ):
        if payoffs is None:
            payoffs = make_matrix_payoffs(payoff_seed, horizon, n_actions)
        payoffs = np.asarray(payoffs, dtype=np.float64)
        if payoffs.ndim != 3 or payoffs.shape[1] != payoffs.shape[2]:
            raise ValueError(f"payoffs must be (horizon, m, m), got {payoffs.shape}")
        self.payoffs = payoffs
        self.horizon = payoffs.shape[0]
        self.n_actions = payoffs.shape[1]
        self.discount = discount
        d = self.horizon + 1
        self.spec = EnvSpec(
            n_agents=2,
            obs_dims=(d, d),
            joint_obs_dim=2 * d + 1,
            action_spaces=(Discrete(self.n_actions), Discrete(self.n_actions)),
            horizon=self.horizon,
        )
        self._done = True
        self._t = 0

    def _local(self) -> tuple[np.ndarray, ...]:
        o = np.zeros(self.horizon + 1)
        o[self._t] = 1.0
        return (o, o.copy())

    def reset(self, seed: int | None = None):
        self._t = 0
        self._done = False
        self._total = 0.0
        self._hits = 0
        self._agent_hits = [0, 0]
        local = self._local()
        return _joint(local, 0, self.horizon), local

    def step(self, joint_action):
        a1, a2 = self._check_actions(joint_action)
        t = self._t
        local = self._local()
        table = self.payoffs[t]
        self._total += self.discount**t * table[a1, a2]
        best = np.unravel_index(np.argmax(table), table.shape)
        self._hits += int((a1, a2) == best)
        self._agent_hits[0] += int(a1 == best[0])
        self._agent_hits[1] += int(a2 == best[1])
        self._t += 1
        done = self._t >= self.horizon
        self._done = done
        nxt = self._local()
        tr = Transition(
            joint_obs=_joint(local, t, self.horizon),
            local_obs=local,
            actions=(a1, a2),
            next_joint_obs=_joint(nxt, self._t, self.horizon),
            next_local_obs=nxt,
            done=done,
            t=t,
        )
        return tr, (self._total if done else None)

    def summary(self) -> dict[str, Any]:
        return {
            "agent_best_action_hits": list(self._agent_hits),
            "joint_best_action_hits": self._hits,
            "total_payoff": round(self._total, 6),
            "steps": self._t,
        }

    def optimal_return(self) -> float:
        """Best return, by exhaustive search over every step's joint actions."""
        best = 0.0
        for t in range(self.horizon):
            best += self.discount**t * max(
                self.payoffs[t, a1, a2]
                for a1, a2 in itertools.product(range(self.n_actions), repeat=2)
            )
        return best

    def expected_return(self, probs: Sequence[np.ndarray]) -> float:
        """Exact expected return when agent ``i`` plays ``probs[i][t]`` at step ``t``."""
        p1, p2 = (np.asarray(p, dtype=np.float64) for p in probs)
        steps = np.einsum("ta,tb,tab->t", p1, p2, self.payoffs)
        return float(np.sum(self.discount ** np.arange(self.horizon) * steps))


def make_matrix_payoffs(seed: int, horizon: int = 5, n_actions: int = 3) -> np.ndarray:
    """Per-step payoff tables: one coordinated optimum among miscoordination traps.

    Every step gets a fresh table in which a single joint action pays 1.0, the
    other cells of the optimum's row and column pay little, and one decoy
    cell pays a tempting intermediate amount.
    """
    rng = np.random.default_rng(seed)
    tables = np.empty((horizon, n_actions, n_actions))
    for t in range(horizon):
        table = rng.uniform(0.0, 0.3, size=(n_actions, n_actions))
        i, j = rng.integers(n_actions, size=2)
        table[i, :] = rng.uniform(0.0, 0.1, size=n_actions)
        table[:, j] = rng.uniform(0.0, 0.1, size=n_actions)
        table[i, j] = 1.0
        free = [(a, b) for a in range(n_actions) for b in range(n_actions) if a != i and b != j]
        da, db = free[rng.integers(len(free))]
        table[da, db] = rng.uniform(0.5, 0.7)
        tables[t] = np.round(table, 3)
    return tables


GRID_MOVES = np.array([(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)])


class GridGather(_EpisodeMixin):
    """Agents roam a square grid and pick up items for a team score.

    Agents see a 3x3 window (item, agent and wall channels) plus their own
    scaled coordinates.  The team return, revealed at the end, is the number
    of items collected minus ``step_penalty`` per elapsed step.
    """

    def __init__(
        self,
        n_agents: int = 2,
        size: int = 5,
        n_items: int = 4,
        horizon: int = 20,
        step_penalty: float = 0.01,
    ):
        if not 2 <= n_agents <= 4:
            raise ValueError("GridGather supports 2 to 4 agents")
        if n_agents + n_items > size * size:
            raise ValueError("too many agents and items for the grid")
        self.n_agents = n_agents
        self.size = size
        self.n_items = n_items
        self.horizon = horizon
        self.step_penalty = step_penalty
        obs_dim = 27 + 2
        self.spec = EnvSpec(
            n_agents=n_agents,
            obs_dims=(obs_dim,) * n_agents,
            joint_obs_dim=obs_dim * n_agents + 1,
            action_spaces=(Discrete(5),) * n_agents,
            horizon=horizon,
        )
        self._done = True

    def reset(self, seed: int | None = None):
        rng = np.random.default_rng(seed)
        cells = rng.permutation(self.size * self.size)[: self.n_agents + self.n_items]
        coords = np.stack(np.divmod(cells, self.size), axis=1)
        self.agents = coords[: self.n_agents].copy()
        self.items = np.zeros((self.size, self.size), dtype=bool)
        for r, c in coords[self.n_agents :]:
            self.items[r, c] = True
        self._t = 0
        self._done = False
        self._collected = [0] * self.n_agents
        local = self._local()
        return _joint(local, 0, self.horizon), local

    def layout(self) -> dict[str, list]:
        return {
            "agents": self.agents.tolist(),
            "items": np.argwhere(self.items).tolist(),
        }

    def _local(self) -> tuple[np.ndarray, ...]:
        occupied = np.zeros((self.size, self.size))
        for r, c in self.agents:
            occupied[r, c] += 1
        out = []
        for i, (r, c) in enumerate(self.agents):
            win = np.zeros((3, 3, 3))
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < self.size and 0 <= cc < self.size:
                        win[0, dr + 1, dc + 1] = self.items[rr, cc]
                        win[1, dr + 1, dc + 1] = occupied[rr, cc] - (dr == 0 and dc == 0)
                    else:
                        win[2, dr + 1, dc + 1] = 1.0
            pos = np.array([r, c], dtype=np.float64) / (self.size - 1)
            out.append(np.concatenate([win.ravel(), pos]))
        return tuple(out)

    def step(self, joint_action):
        acts = self._check_actions(joint_action)
        t = self._t
        local = self._local()
        for i, a in enumerate(acts):
            self.agents[i] = np.clip(self.agents[i] + GRID_MOVES[a], 0, self.size - 1)
            r, c = self.agents[i]
            if self.items[r, c]:
                self.items[r, c] = False
                self._collected[i] += 1
        self._t += 1
        done = self._t >= self.horizon or not self.items.any()
        self._done = done
        nxt = self._local()
        tr = Transition(
            joint_obs=_joint(local, t, self.horizon),
            local_obs=local,
            actions=acts,
            next_joint_obs=_joint(nxt, self._t, self.horizon),
            next_local_obs=nxt,
            done=done,
            t=t,
        )
        ret = None
        if done:
            ret = sum(self._collected) - self.step_penalty * self._t
        return tr, ret

    def summary(self) -> dict[str, Any]:
        return {
            "items_collected_per_agent": list(self._collected),
            "items_remaining": int(self.items.sum()),
            "total_items_collected": int(sum(self._collected)),
            "steps": self._t,
        }


# --- tabular MDP ------------------------------------------------------------


@dataclass
class TabularMDP:
    """Two-agent MDP small enough to enumerate every trajectory.

    ``transition[s, a1, a2, s']`` and ``reward[s, a1, a2]`` are indexed by
    the per-agent actions; ``initial`` is the start-state distribution.
    """

    transition: np.ndarray
    reward: np.ndarray
    initial: np.ndarray
    horizon: int
    gamma: float = 0.99

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        s, m1, m2, s2 = self.transition.shape
        if s != s2 or self.reward.shape != (s, m1, m2) or self.initial.shape != (s,):
            raise ValueError("inconsistent TabularMDP shapes")
        if s > 8 or max(m1, m2) > 3 or not 1 <= self.horizon <= 4:
            raise ValueError("TabularMDP limited to <=8 states, <=3 actions, horizon 1..4")
        if np.any(self.transition < 0) or np.any(self.transition > 1):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if np.max(np.abs(self.transition.sum(-1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1")
        if abs(self.initial.sum() - 1.0) > 1e-12:
            raise ValueError("initial distribution must sum to 1")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> tuple[int, int]:
        return self.transition.shape[1], self.transition.shape[2]

    @property
    def n_joint_actions(self) -> int:
        m1, m2 = self.n_actions
        return m1 * m2


def random_tabular_mdp(
    seed: int,
    n_states: int = 4,
    n_actions: tuple[int, int] = (2, 2),
    horizon: int = 3,
    gamma: float = 0.99,
    deterministic: bool = False,
    additive_reward: bool = False,
    reward_scale: float = 1.0,
    leader_transitions: bool = False,
) -> TabularMDP:
    """Random MDP starting in state 0.

    ``leader_transitions`` makes the next state a deterministic function of
    the state and agent 0's action only.
    """
    rng = np.random.default_rng(seed)
    m1, m2 = n_actions
    if leader_transitions:
        nxt = rng.integers(n_states, size=(n_states, m1, 1)).repeat(m2, axis=2)
        trans = np.eye(n_states)[nxt]
    elif deterministic:
        nxt = rng.integers(n_states, size=(n_states, m1, m2))
        trans = np.eye(n_states)[nxt]
    else:
        trans = rng.dirichlet(np.ones(n_states), size=(n_states, m1, m2))
    if additive_reward:
        r1 = rng.uniform(-1, 1, size=(n_states, m1, 1))
        r2 = rng.uniform(-1, 1, size=(n_states, 1, m2))
        reward = reward_scale * (r1 + r2) / 2.0
    else:
        reward = reward_scale * rng.uniform(-1, 1, size=(n_states, m1, m2))
    initial = np.zeros(n_states)
    initial[0] = 1.0
    return TabularMDP(trans, reward, initial, horizon, gamma)


def policy_as_probs(mdp: TabularMDP, policy) -> np.ndarray:
    """Normalise a joint policy to an ``(S, m1, m2)`` probability table.

    Accepts either that table or an integer ``(S, 2)`` deterministic table.
    """
    policy = np.asarray(policy)
    s = mdp.n_states
    m1, m2 = mdp.n_actions
    if policy.shape == (s, 2) and np.issubdtype(policy.dtype, np.integer):
        probs = np.zeros((s, m1, m2))
        probs[np.arange(s), policy[:, 0], policy[:, 1]] = 1.0
        return probs
    if policy.shape != (s, m1, m2):
        raise ValueError(f"policy table must be (S, 2) ints or (S, m1, m2), got {policy.shape}")
    return policy.astype(np.float64)


@dataclass(frozen=True)
class EnumeratedTrajectory:
    states: tuple[int, ...]  # s_0 .. s_H (last one is the absorbing successor)
    actions: tuple[tuple[int, int], ...]
    probability: float
    ret: float


def enumerate_trajectories(
    mdp: TabularMDP, joint_policy=None, limit: int = 200_000
) -> list[EnumeratedTrajectory]:
    """Every trajectory of positive probability, with its discounted return.

    ``joint_policy=None`` enumerates all action sequences with probability
    computed under the uniform joint policy.
    """
    m1, m2 = mdp.n_actions
    if joint_policy is None:
        probs = np.full((mdp.n_states, m1, m2), 1.0 / (m1 * m2))
    else:
        probs = policy_as_probs(mdp, joint_policy)
    bound = mdp.n_states * (m1 * m2 * mdp.n_states) ** mdp.horizon
    if bound > limit * 50:
        raise EnumerationTooLarge(f"up to {bound} trajectories; refusing to enumerate")

    out: list[EnumeratedTrajectory] = []

    def walk(states, actions, prob, ret):
        if len(out) > limit:
            raise EnumerationTooLarge(f"more than {limit} trajectories")
        t = len(actions)
        s = states[-1]
        if t == mdp.horizon:
            out.append(EnumeratedTrajectory(tuple(states), tuple(actions), prob, ret))
            return
        for a1 in range(m1):
            for a2 in range(m2):
                pa = probs[s, a1, a2]
                if pa == 0.0:
                    continue
                r = ret + mdp.gamma**t * mdp.reward[s, a1, a2]
                for s2 in np.flatnonzero(mdp.transition[s, a1, a2]):
                    p = prob * pa * mdp.transition[s, a1, a2, s2]
                    walk(states + [int(s2)], actions + [(a1, a2)], p, r)

    for s0 in np.flatnonzero(mdp.initial):
        walk([int(s0)], [], float(mdp.initial[s0]), 0.0)
    return out


class TabularMdpEnv(_EpisodeMixin):
    """Step-wise view of a :class:`TabularMDP`; both agents see the state one-hot.

    With ``time_features`` each local observation also carries a one-hot step
    counter, which a finite-horizon value needs to tell terminal steps apart.
    """

    def __init__(self, mdp: TabularMDP, time_features: bool = False):
        self.mdp = mdp
        self.time_features = time_features
        s = mdp.n_states + (mdp.horizon + 1 if time_features else 0)
        m1, m2 = mdp.n_actions
        self.spec = EnvSpec(
            n_agents=2,
            obs_dims=(s, s),
            joint_obs_dim=2 * s + 1,
            action_spaces=(Discrete(m1), Discrete(m2)),
            horizon=mdp.horizon,
        )
        self._done = True

    def observe(self, state: int, t: int):
        o = np.zeros(self.spec.obs_dims[0])
        o[state] = 1.0
        if self.time_features:
            o[self.mdp.n_states + t] = 1.0
        local = (o, o.copy())
        return _joint(local, t, self.mdp.horizon), local

    def reset(self, seed: int | None = None):
        rng = np.random.default_rng(seed)
        self._rng = rng
        self._state = int(rng.choice(self.mdp.n_states, p=self.mdp.initial))
        self._t = 0
        self._done = False
        self._ret = 0.0
        self._path = [self._state]
        return self.observe(self._state, 0)

    def step(self, joint_action):
        a1, a2 = self._check_actions(joint_action)
        s, t = self._state, self._t
        self._ret += self.mdp.gamma**t * self.mdp.reward[s, a1, a2]
        s2 = int(self._rng.choice(self.mdp.n_states, p=self.mdp.transition[s, a1, a2]))
        self._state = s2
        self._t += 1
        self._path.append(s2)
        done = self._t >= self.mdp.horizon
        self._done = done
        tr = self.make_transition(s, (a1, a2), s2, t)
        return tr, (self._ret if done else None)

    def make_transition(self, s: int, actions, s2: int, t: int) -> Transition:
        joint, local = self.observe(s, t)
        njoint, nlocal = self.observe(s2, t + 1)
        return Transition(
            joint_obs=joint,
            local_obs=local,
            actions=tuple(int(a) for a in actions),
            next_joint_obs=njoint,
            next_local_obs=nlocal,
            done=t + 1 >= self.mdp.horizon,
            t=t,
        )

    def trajectory(self, path: EnumeratedTrajectory) -> Trajectory:
        """Materialise an enumerated path as a :class:`Trajectory`."""
        trs = [
            self.make_transition(path.states[t], path.actions[t], path.states[t + 1], t)
            for t in range(len(path.actions))
        ]
        return Trajectory(trs, episodic_return=path.ret, metadata={"steps": len(trs)})

    def summary(self) -> dict[str, Any]:
        return {"visited_states": list(self._path), "steps": self._t}


def make_env(name: str, **params) -> Env:
    if name == "coop_matrix":
        return CoopMatrixGame(**params)
    if name == "grid_gather":
        return GridGather(**params)
    if name == "tabular":
        return TabularMdpEnv(random_tabular_mdp(**params))
    raise ValueError(f"unknown env {name!r}")
