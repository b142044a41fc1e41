"""Training loop shared by IMAP and the baselines: collect, label, fit rewards, update policies."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import deque
from functools import partial
from pathlib import Path

import numpy as np

from .baselines import (
    SupervisedRewardNet,
    online_ipl_extract,
    sparse_rewards_flat,
    train_sl_reward,
)
from .config import RunConfig, from_dict
from .envs import CoopMatrixGame, Trajectory, make_env
from .nn import Adam, CheckpointError, assign_blocks, decode_blocks, encode_blocks
from .policy import PolicyBundle, PpoConfig, train_iteration
from .preference import (
    SCENARIOS,
    LlmEndpoint,
    LlmLabeler,
    PreferenceBuffer,
    candidate_pairs,
    rule_label,
)
from .reward_model import (
    ImplicitRewardModel,
    RewardModelDivergence,
    RewardModelTrainer,
    RewardTrainConfig,
)
from .rollout import collect, flatten

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "iter",
    "env_steps",
    "mean_return",
    "policy_value",
    "pref_loss",
    "extreme_v_loss",
    "mean_w",
    "bias_w",
    "actor_loss",
    "critic_loss",
    "entropy",
    "prop2_residual",
    "pairs_added",
    "llm_fallbacks",
)

NAN = float("nan")


class TrainingDivergence(RuntimeError):
    pass


class TransitionBuffer:
    """Most recent trajectories, capped by total transition count."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._trajs: deque[Trajectory] = deque()
        self._size = 0
        self._flat = None

    def __len__(self) -> int:
        return self._size

    def add(self, trajs) -> None:
        for tr in trajs:
            self._trajs.append(tr)
            self._size += len(tr)
        while self._size > self.capacity and len(self._trajs) > 1:
            self._size -= len(self._trajs.popleft())
        self._flat = None

    @property
    def flat(self):
        if self._flat is None:
            self._flat = flatten(list(self._trajs))
        return self._flat


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


class Runner:
    def __init__(self, config: RunConfig, llm_client=None):
        self.cfg = config.validate()
        c = self.cfg
        seeds = np.random.SeedSequence(c.seed).spawn(4)
        init_rng = np.random.default_rng(seeds[0])
        self.pair_rng = np.random.default_rng(seeds[1])
        self.train_rng = np.random.default_rng(seeds[2])
        self.collect_rng = np.random.default_rng(seeds[3])

        self.make_env = partial(make_env, c.env.name, **c.env.params)
        self.env = self.make_env()
        spec = self.env.spec
        p = c.ppo
        ppo = PpoConfig(
            gamma=p.gamma,
            gae_lambda=p.gae_lambda,
            clip=p.clip,
            value_clip=p.value_clip,
            entropy_coef=p.entropy_coef,
            lr=p.lr,
            critic_lr=p.critic_lr,
            epochs=p.epochs,
            minibatch=p.minibatch,
            max_grad_norm=p.max_grad_norm,
            standardize=p.standardize,
            paper_literal_delta=p.paper_literal_delta,
        )
        self.bundle = PolicyBundle(spec, ppo, tuple(p.hidden), init_rng)
        r = c.reward
        self.model = None
        self.sl_net = None
        if c.algo in ("imap_la", "imap_ga", "online_ipl"):
            self.model = ImplicitRewardModel(spec, tuple(r.hidden), r.beta, p.gamma, init_rng)
            self.trainer = RewardModelTrainer(
                self.model,
                RewardTrainConfig(
                    lr=r.lr,
                    pref_batch=r.pref_batch,
                    transition_batch=r.transition_batch,
                    reg_coef=r.reg_coef,
                    behavior_correction=r.behavior_correction,
                ),
            )
        elif c.algo == "sl_mappo":
            self.sl_net = SupervisedRewardNet(spec, tuple(r.hidden), p.gamma, init_rng)
            self.sl_opt = Adam(self.sl_net.parameters(), r.lr)
        self.prefs = PreferenceBuffer(r.pref_capacity)
        self.transitions = TransitionBuffer(r.transition_capacity)
        self.labeler = None
        self.llm_client = llm_client
        self.reward_steps_done = 0
        self.env_steps = 0
        self.out = Path(c.output_dir)

    # -- pieces of one iteration ----------------------------------------------

    def _label(self, trajs: list[Trajectory]) -> list:
        cands = candidate_pairs(trajs, self.cfg.reward.max_pairs, self.pair_rng)
        if self.cfg.preference_source == "llm":
            if self.labeler is None:
                l = self.cfg.llm
                endpoint = LlmEndpoint.from_env(
                    base_url=l.base_url,
                    model=l.model,
                    timeout=l.timeout,
                    max_concurrency=l.max_concurrency,
                    audit_path=str(self.out / l.audit_file),
                )
                scenario = SCENARIOS.get(self.cfg.env.name, self.cfg.env.name)
                self.labeler = LlmLabeler(endpoint, scenario, self.llm_client)
            return self.labeler.label_pairs(cands)
        return [p for p in (rule_label(a, b) for a, b in cands) if p is not None]

    def policy_value(self) -> float:
        """Exact expected return of the current stochastic policy, when enumerable."""
        if not isinstance(self.env, CoopMatrixGame):
            return NAN
        steps = np.eye(self.env.horizon + 1)[: self.env.horizon]
        probs = [actor.probs(steps) for actor in self.bundle.actors]
        return self.env.expected_return(probs)

    def optimal_value(self) -> float:
        return self.env.optimal_return() if isinstance(self.env, CoopMatrixGame) else NAN

    def iteration(self, it: int) -> dict:
        c = self.cfg
        seed = int(self.collect_rng.integers(2**31 - 1))
        batch = collect(self.make_env, self.bundle.actors, c.episodes_per_iter, seed, it, c.workers)
        self.env_steps += batch.n_transitions
        row = {k: NAN for k in METRIC_COLUMNS}
        row.update(iter=it, env_steps=self.env_steps, pairs_added=0, llm_fallbacks=0)
        if not batch.trajectories:
            return row
        row["mean_return"] = float(batch.returns.mean())
        flat = batch.flat

        if c.algo != "sparse_mappo":
            pairs = self._label(batch.trajectories)
            self.prefs.add(pairs)
            row["pairs_added"] = len(pairs)
            self.transitions.add(batch.trajectories)
        if self.labeler is not None:
            row["llm_fallbacks"] = self.labeler.fallbacks

        steps = c.reward.steps_per_iter if len(self.prefs) else 0
        if self.model is not None and steps:
            try:
                pref, ev = self.trainer.train(self.prefs, self.transitions.flat, steps, self.train_rng)
            except RewardModelDivergence as exc:
                raise TrainingDivergence(f"iteration {it}: {exc}") from exc
            self.reward_steps_done += steps
            row["pref_loss"] = float(np.mean(pref))
            row["extreme_v_loss"] = float(np.mean(ev))
        elif self.sl_net is not None and steps:
            trace = train_sl_reward(
                self.sl_net, self.sl_opt, list(self.prefs), steps, c.reward.pref_batch, self.train_rng
            )
            row["pref_loss"] = float(np.mean(trace))
        if self.model is not None:
            row["mean_w"] = float(self.model.mixer.weights().mean())
            row["bias_w"] = float(self.model.mixer.bias[0])

        metrics = self._update_policy(flat, batch)
        row.update({k: v for k, v in metrics.items() if k in row})
        for key in ("actor_loss", "critic_loss"):
            if key in metrics and not math.isfinite(metrics[key]):
                raise TrainingDivergence(f"iteration {it}: non-finite {key} ({metrics})")
        row["policy_value"] = self.policy_value()
        return row

    def _update_policy(self, flat, batch) -> dict:
        c = self.cfg
        algo = c.algo
        if algo == "online_ipl":
            every = c.reward.ipl_extract_every
            done, prev = self.reward_steps_done, self.reward_steps_done - c.reward.steps_per_iter
            if len(self.transitions) and done // every > max(prev, 0) // every:
                online_ipl_extract(
                    self.model,
                    self.transitions.flat,
                    c.reward.beta,
                    steps=c.reward.bc_steps,
                    lr=c.reward.bc_lr,
                    init=self.bundle.actors,
                )
            return {}
        if algo == "sparse_mappo":
            rewards = sparse_rewards_flat(flat, batch.returns)
            _, m = train_iteration(self.bundle, flat, rewards, self.train_rng)
        elif algo == "sl_mappo":
            rewards = self.sl_net.rewards(flat)
            _, m = train_iteration(self.bundle, flat, rewards, self.train_rng)
        else:
            R, r = self.model.rewards(flat)
            if algo == "imap_la":
                _, m = train_iteration(
                    self.bundle,
                    flat,
                    R,
                    self.train_rng,
                    local_rewards=r,
                    weights=self.model.mixer.weights(),
                    bias=float(self.model.mixer.bias[0]),
                )
            else:
                _, m = train_iteration(self.bundle, flat, R, self.train_rng)
        return m

    # -- persistence -----------------------------------------------------------

    def blocks(self, it: int) -> dict:
        blocks = {f"policy.{k}": v for k, v in self.bundle.parameters().items()}
        if self.model is not None:
            blocks.update({f"reward.{k}": v for k, v in self.model.parameters().items()})
        if self.sl_net is not None:
            blocks.update({f"sl.{k}": v for k, v in self.sl_net.parameters().items()})
        blocks["meta.iteration"] = np.array([float(it)])
        return blocks

    def save_checkpoint(self, it: int) -> Path:
        ckdir = self.out / "checkpoints"
        ckdir.mkdir(parents=True, exist_ok=True)
        path = ckdir / f"ckpt_{it:05d}.bin"
        data = encode_blocks(self.blocks(it))
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
        return path

    def run(self) -> dict:
        c = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        c.dump_json(self.out / "config.json")
        metrics_path = self.out / "metrics.csv"
        timing_path = self.out / "timing.csv"
        rows = []
        start = time.perf_counter()
        with open(metrics_path, "w", newline="") as mf, open(timing_path, "w", newline="") as tf:
            mw = csv.writer(mf, lineterminator="\n")
            tw = csv.writer(tf, lineterminator="\n")
            mw.writerow(METRIC_COLUMNS)
            tw.writerow(("iter", "wall_seconds"))
            for it in range(c.iterations):
                row = self.iteration(it)
                rows.append(row)
                mw.writerow([_fmt(row[k]) for k in METRIC_COLUMNS])
                mf.flush()
                tw.writerow((it, f"{time.perf_counter() - start:.3f}"))
                tf.flush()
                if (it + 1) % c.checkpoint_every == 0 or it + 1 == c.iterations:
                    self.save_checkpoint(it + 1)
        final = self.policy_value()
        optimum = self.optimal_value()
        summary = {
            "algo": c.algo,
            "env": c.env.name,
            "seed": c.seed,
            "iterations": c.iterations,
            "env_steps": self.env_steps,
            "final_mean_return": rows[-1]["mean_return"] if rows else NAN,
            "final_policy_value": final,
            "optimal_return": optimum,
            "optimal_fraction": final / optimum if optimum and math.isfinite(optimum) else NAN,
            "preference_pairs": self.prefs.inserted,
            "llm_fallbacks": self.labeler.fallbacks if self.labeler else 0,
            "wall_seconds": round(time.perf_counter() - start, 3),
        }
        (self.out / "summary.json").write_text(
            json.dumps({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in summary.items()}, indent=2)
            + "\n"
        )
        return summary


# --- checkpoint restore -----------------------------------------------------


def restore_runner(run_dir, checkpoint=None) -> tuple[Runner, int]:
    """Rebuild a runner from ``run_dir/config.json`` and load a checkpoint into it.

    Defaults to the latest checkpoint under ``run_dir/checkpoints``.
    """
    run_dir = Path(run_dir)
    cfg = from_dict(json.loads((run_dir / "config.json").read_text()))
    if checkpoint is None:
        found = sorted((run_dir / "checkpoints").glob("ckpt_*.bin"))
        if not found:
            raise CheckpointError(f"no checkpoints under {run_dir / 'checkpoints'}")
        checkpoint = found[-1]
    blocks = decode_blocks(Path(checkpoint).read_bytes())
    runner = Runner(cfg)
    target = runner.blocks(0)
    extra = sorted(set(blocks) - set(target))
    if extra:
        raise CheckpointError(f"checkpoint has blocks this config does not build: {extra}")
    it = int(blocks["meta.iteration"][0]) if "meta.iteration" in blocks else 0
    assign_blocks({k: v for k, v in target.items() if k != "meta.iteration"}, blocks)
    return runner, it


def probe_outputs(runner: Runner, episodes: int = 4, seed: int = 12345) -> dict[str, np.ndarray]:
    """Forward outputs of every network on a fixed probe batch."""
    batch = collect(runner.make_env, runner.bundle.actors, episodes, seed)
    flat = batch.flat
    out = {"critic": runner.bundle.values(flat.joint_obs)}
    for i, actor in enumerate(runner.bundle.actors):
        out[f"actor{i}"] = actor.log_prob(flat.local_obs[i], flat.actions[i])
    if runner.model is not None:
        out["reward.global"], out["reward.local"] = runner.model.rewards(flat)
    if runner.sl_net is not None:
        out["sl"] = runner.sl_net.rewards(flat)
    return out


def checkpoint_roundtrip(path, run_dir=None, atol: float = 1e-12) -> bool:
    """Load, re-save and reload a checkpoint; True when bytes and outputs match.

    ``run_dir`` defaults to the directory above ``checkpoints/``.
    """
    path = Path(path)
    run_dir = Path(run_dir) if run_dir is not None else path.parent.parent
    original = path.read_bytes()
    first, it = restore_runner(run_dir, path)
    resaved = encode_blocks(first.blocks(it))
    if resaved != original:
        return False
    tmp = path.with_name(path.stem + ".roundtrip.tmp")
    try:
        tmp.write_bytes(resaved)
        second, _ = restore_runner(run_dir, tmp)
    finally:
        tmp.unlink(missing_ok=True)
    a, b = probe_outputs(first), probe_outputs(second)
    return a.keys() == b.keys() and all(np.allclose(a[k], b[k], rtol=0.0, atol=atol) for k in a)
