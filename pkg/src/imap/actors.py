"""Decentralized actor heads over :class:`~imap.nn.Mlp`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .envs import ActionSpace, Box, Discrete
from .nn import Mlp, Params, Tape

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class ActorCache:
    tape: Tape
    extra: Any


class CategoricalActor:
    """Softmax policy over ``n_actions`` logits."""

    def __init__(
        self,
        obs_dim: int,
        n_actions: int,
        hidden: tuple[int, ...] = (256, 256),
        rng: np.random.Generator | None = None,
    ):
        self.net = Mlp((obs_dim, *hidden, n_actions), rng, out_scale=0.01)
        self.n_actions = n_actions

    def parameters(self) -> Params:
        return {"net": self.net.params}

    def log_probs_all(self, obs) -> np.ndarray:
        return log_softmax(np.atleast_2d(self.net(np.atleast_2d(obs))))

    def probs(self, obs) -> np.ndarray:
        return np.exp(self.log_probs_all(obs))

    def sample(self, obs, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        logp = self.log_probs_all(obs)
        cdf = np.cumsum(np.exp(logp), axis=1)
        u = rng.random(len(logp))[:, None] * cdf[:, -1:]
        actions = np.minimum((u > cdf).sum(axis=1), self.n_actions - 1)
        return actions, logp[np.arange(len(logp)), actions]

    def mode(self, obs) -> np.ndarray:
        return np.argmax(self.log_probs_all(obs), axis=1)

    def log_prob(self, obs, actions) -> np.ndarray:
        logp = self.log_probs_all(obs)
        return logp[np.arange(len(logp)), np.asarray(actions, dtype=np.int64)]

    def evaluate(self, obs, actions) -> tuple[np.ndarray, np.ndarray, ActorCache]:
        """Log-prob of ``actions`` and policy entropy, with a cache for backward."""
        logits, tape = self.net.record(np.atleast_2d(obs))
        logp_all = log_softmax(logits)
        p = np.exp(logp_all)
        actions = np.asarray(actions, dtype=np.int64)
        logp = logp_all[np.arange(len(actions)), actions]
        ent = -(p * logp_all).sum(axis=1)
        return logp, ent, ActorCache(tape, (p, logp_all, ent, actions))

    def backward(self, cache: ActorCache, g_logp, g_ent) -> Params:
        p, logp_all, ent, actions = cache.extra
        g_logp = np.asarray(g_logp, dtype=np.float64)
        g_ent = np.asarray(g_ent, dtype=np.float64)
        onehot = np.zeros_like(p)
        onehot[np.arange(len(actions)), actions] = 1.0
        d_logits = g_logp[:, None] * (onehot - p)
        d_logits += g_ent[:, None] * (-p * (logp_all + ent[:, None]))
        return {"net": self.net.backward(cache.tape, d_logits)}

    def score(self, obs, actions) -> np.ndarray:
        """Per-sample gradient of ``log pi(a|o)``, shape ``(batch, n_params)``."""
        logits, tape = self.net.record(np.atleast_2d(obs))
        p = np.exp(log_softmax(logits))
        onehot = np.zeros_like(p)
        onehot[np.arange(len(p)), np.asarray(actions, dtype=np.int64)] = 1.0
        return self.net.backward(tape, onehot - p, per_sample=True)


class GaussianActor:
    """Diagonal Gaussian: MLP mean plus a state-independent learned log-std."""

    def __init__(
        self,
        obs_dim: int,
        action_dim: int,
        hidden: tuple[int, ...] = (256, 256),
        rng: np.random.Generator | None = None,
        init_log_std: float = -0.5,
    ):
        self.net = Mlp((obs_dim, *hidden, action_dim), rng, out_scale=0.01)
        self.log_std = np.full(action_dim, init_log_std)
        self.action_dim = action_dim

    def parameters(self) -> Params:
        return {"net": self.net.params, "log_std": self.log_std}

    def _log_std(self) -> np.ndarray:
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, obs, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        mean = np.atleast_2d(self.net(np.atleast_2d(obs)))
        actions = mean + np.exp(self._log_std()) * rng.standard_normal(mean.shape)
        return actions, self.log_prob(obs, actions)

    def mode(self, obs) -> np.ndarray:
        return np.atleast_2d(self.net(np.atleast_2d(obs)))

    def log_prob(self, obs, actions) -> np.ndarray:
        mean = np.atleast_2d(self.net(np.atleast_2d(obs)))
        ls = self._log_std()
        z = (np.asarray(actions).reshape(mean.shape) - mean) * np.exp(-ls)
        return (-0.5 * z * z - ls - _HALF_LOG_2PI).sum(axis=1)

    def evaluate(self, obs, actions):
        mean, tape = self.net.record(np.atleast_2d(obs))
        ls = self._log_std()
        a = np.asarray(actions, dtype=np.float64).reshape(mean.shape)
        z = (a - mean) * np.exp(-ls)
        logp = (-0.5 * z * z - ls - _HALF_LOG_2PI).sum(axis=1)
        ent = np.full(len(a), float(np.sum(ls + 0.5 + _HALF_LOG_2PI)))
        return logp, ent, ActorCache(tape, (z, ls))

    def backward(self, cache: ActorCache, g_logp, g_ent) -> Params:
        z, ls = cache.extra
        g_logp = np.asarray(g_logp, dtype=np.float64)
        g_ent = np.asarray(g_ent, dtype=np.float64)
        d_mean = g_logp[:, None] * z * np.exp(-ls)
        d_ls = (g_logp[:, None] * (z * z - 1.0)).sum(axis=0) + g_ent.sum()
        inside = (self.log_std > LOG_STD_MIN) & (self.log_std < LOG_STD_MAX)
        return {"net": self.net.backward(cache.tape, d_mean), "log_std": d_ls * inside}


Actor = CategoricalActor | GaussianActor


def make_actor(
    obs_dim: int,
    space: ActionSpace,
    hidden: tuple[int, ...],
    rng: np.random.Generator | None,
) -> Actor:
    if isinstance(space, Discrete):
        return CategoricalActor(obs_dim, space.n, hidden, rng)
    if isinstance(space, Box):
        return GaussianActor(obs_dim, space.dim, hidden, rng)
    raise TypeError(f"unsupported action space {space!r}")
