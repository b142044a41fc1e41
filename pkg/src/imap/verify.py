"""Self-checks driven by ``imap verify``: gradients, identities and oracles.

Every check returns a :class:`CheckResult` whose ``details`` are JSON-ready.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .actors import CategoricalActor
from .baselines import (
    SupervisedRewardNet,
    advantage_weights,
    bc_loss,
    sl_reward_loss,
)
from .envs import CoopMatrixGame, GridGather, random_tabular_mdp, TabularMdpEnv
from .nn import Mlp, gradient_check
from .oracle import (
    TheoremOneConfig,
    check_prop1,
    fit_soft_value,
    run_theorem1_harness,
    soft_value_oracle,
    theorem1_fixture,
)
from .policy import (
    PolicyBundle,
    PpoConfig,
    actor_loss_dual,
    actor_loss_global,
    build_advantages,
    critic_loss,
    prop2_residual,
    prop3_empirical,
    prop3_exact,
    critic_values,
    gae_global,
    gae_local,
)
from .preference import make_pairs_rule
from .reward_model import (
    ImplicitRewardModel,
    LinearMixer,
    PhiRegularizer,
    extreme_v_loss,
    preference_loss,
)
from .rollout import collect

CHECKS = ("gradients", "prop1", "prop2", "prop3", "soft_value", "theorem1")


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "seconds": round(self.seconds, 3), "details": _jsonable(self.details)}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if math.isnan(x) else x
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# --- gradient suite -----------------------------------------------------------


GRAD_TOL = 1e-4


def _grad_fixture(seed: int, env_cls=CoopMatrixGame, hidden=(8, 8)):
    rng = np.random.default_rng(seed)
    env = env_cls()
    spec = env.spec
    bundle = PolicyBundle(spec, PpoConfig(entropy_coef=0.05), hidden, rng)
    batch = collect(env_cls, bundle.actors, 10, seed=seed)
    flat = batch.flat
    # move the actors off the behaviour policy so ratios differ from 1
    for actor in bundle.actors:
        actor.net.params += rng.normal(scale=0.1, size=actor.net.params.shape)
    model = ImplicitRewardModel(spec, hidden, beta=0.5 + rng.random(), gamma=0.9, rng=rng)
    model.mixer.raw[:] = rng.normal(size=spec.n_agents)
    model.mixer.bias[0] = rng.normal()
    pairs = make_pairs_rule(batch.trajectories, 8, rng)
    return rng, bundle, batch, flat, model, pairs


def gradient_suite(seeds=range(10), max_coords: int = 12) -> dict[str, list[float]]:
    """Worst relative error per loss and seed against central differences."""
    out: dict[str, list[float]] = {}

    def record(name, fn: Callable[[], float], grads, params, rng):
        err = gradient_check(fn, grads, params, step=1e-5, max_coords=max_coords, rng=rng)
        out.setdefault(name, []).append(err)

    for seed in seeds:
        env_cls = CoopMatrixGame if seed % 2 == 0 else GridGather
        rng, bundle, batch, flat, model, pairs = _grad_fixture(seed, env_cls)
        reg = PhiRegularizer(0.3)
        res = preference_loss(model, pairs, reg)
        record("preference_loss", lambda: preference_loss(model, pairs, reg).loss, res.grads, model.parameters(), rng)

        log_mu = flat.logp.sum(axis=1)
        res = extreme_v_loss(model, flat, log_mu)
        record("extreme_v_loss", lambda: extreme_v_loss(model, flat, log_mu).loss, res.grads, model.v_parameters(), rng)

        actor_params = {k: v for k, v in bundle.parameters().items() if k.startswith("actor")}
        adv = rng.normal(size=(len(flat), bundle.n_agents))
        res = actor_loss_dual(bundle, flat, adv)
        record("actor_loss_dual", lambda: actor_loss_dual(bundle, flat, adv).loss, res.grads, actor_params, rng)
        g = adv[:, 0]
        res = actor_loss_global(bundle, flat, g)
        record("actor_loss_global", lambda: actor_loss_global(bundle, flat, g).loss, res.grads, actor_params, rng)

        targets = rng.normal(size=len(flat))
        old = bundle.values(flat.joint_obs) + rng.normal(scale=0.3, size=len(flat))
        res = critic_loss(bundle, flat.joint_obs, targets, old)
        record(
            "critic_loss",
            lambda: critic_loss(bundle, flat.joint_obs, targets, old).loss,
            res.grads,
            {"critic": bundle.critic.params},
            rng,
        )

        net = SupervisedRewardNet(bundle.spec, (8, 8), gamma=0.9, rng=rng)
        res = sl_reward_loss(net, pairs)
        record("sl_reward_loss", lambda: sl_reward_loss(net, pairs).loss, res.grads, net.parameters(), rng)

        w = advantage_weights(model, flat)
        res = bc_loss(bundle.actors, flat, w)
        record("bc_loss", lambda: bc_loss(bundle.actors, flat, w).loss, res.grads, actor_params, rng)
    return out


def check_gradients(seeds=range(10)) -> CheckResult:
    t = time.perf_counter()
    errs = gradient_suite(seeds)
    worst = {k: max(v) for k, v in errs.items()}
    return CheckResult(
        "gradients",
        all(v < GRAD_TOL for v in worst.values()),
        {"tolerance": GRAD_TOL, "worst_relative_error": worst, "seeds": len(list(seeds))},
        time.perf_counter() - t,
    )


# --- advantage decomposition --------------------------------------------------


def prop2_instance(seed: int, mixer: LinearMixer | None = None, hidden=(16, 16), lam: float = 0.95):
    """Residuals (corrected, uncorrected) on one random model/critic/trajectory."""
    rng = np.random.default_rng(seed)
    env_cls = CoopMatrixGame if seed % 2 == 0 else GridGather
    env = env_cls()
    spec = env.spec
    gamma = float(rng.uniform(0.8, 0.999))
    model = ImplicitRewardModel(spec, hidden, beta=1.0, gamma=gamma, rng=rng)
    if mixer is None:
        model.mixer.raw[:] = rng.normal(size=spec.n_agents)
        model.mixer.bias[0] = rng.normal()
    else:
        model.mixer = mixer
    critic = Mlp((spec.joint_obs_dim, *hidden, 1), rng)
    bundle = PolicyBundle(spec, PpoConfig(), (8,), rng)
    traj = collect(env_cls, bundle.actors, 1, seed=seed).trajectories[0]
    arrs = traj.arrays
    R, r = model.rewards(arrs)
    v, v_next = critic_values(critic, arrs)
    adv, _ = gae_global(R, v, v_next, arrs.done, gamma, lam)
    w = model.mixer.weights()
    out = []
    for literal in (False, True):
        loc = gae_local(r, v, v_next, arrs.done, w, gamma, lam, literal)
        out.append(prop2_residual(adv, loc, w, model.mixer.bias[0], arrs.done, gamma, lam))
    return tuple(out)


def load_mixer_fixture(path) -> LinearMixer:
    """JSON ``{"weights": [...], "bias": b}``; non-positive weights raise ValueError."""
    data = json.loads(Path(path).read_text())
    return LinearMixer.from_effective(data["weights"], data.get("bias", 0.0))


def check_prop2(instances: int = 100, fixture=None) -> CheckResult:
    t = time.perf_counter()
    mixer = None
    if fixture is not None:
        try:
            mixer = load_mixer_fixture(fixture)
        except (ValueError, KeyError) as exc:
            return CheckResult(
                "prop2",
                False,
                {"precondition_violation": f"mixer fixture {fixture}: {exc}"},
                time.perf_counter() - t,
            )
    corrected, literal = [], []
    for seed in range(instances):
        a, b = prop2_instance(seed, mixer)
        corrected.append(a)
        literal.append(b)
    return CheckResult(
        "prop2",
        max(corrected) < 1e-8 and min(literal) > 0.1,
        {
            "instances": instances,
            "max_residual_corrected": max(corrected),
            "min_residual_uncorrected": min(literal),
            "median_residual_uncorrected": float(np.median(literal)),
        },
        time.perf_counter() - t,
    )


# --- policy-gradient decomposition --------------------------------------------


def tabular_softmax_actor(n_states: int, n_actions: int, rng) -> CategoricalActor:
    """Single linear layer on a one-hot state: a tabular softmax policy."""
    actor = CategoricalActor(n_states, n_actions, hidden=(), rng=rng)
    actor.net.params[:] = rng.normal(size=actor.net.params.shape)
    return actor


def prop3_fixture(seed: int, n_states: int = 4, n_actions=(2, 3)):
    rng = np.random.default_rng(seed)
    actors = [tabular_softmax_actor(n_states, m, rng) for m in n_actions]
    eye = np.eye(n_states)
    probs = [a.probs(eye) for a in actors]
    scores = [
        np.stack([a.score(np.repeat(eye[s : s + 1], m, axis=0), np.arange(m)) for s in range(n_states)])
        for a, m in zip(actors, n_actions)
    ]
    local_adv = [rng.normal(size=(n_states, m)) for m in n_actions]
    state_weights = rng.dirichlet(np.ones(n_states))
    weights = LinearMixer(2, rng.normal(size=2)).weights()
    bias = float(rng.normal())
    gamma = 0.99
    c_state = 1.0 + rng.random(n_states) * 3.0
    return rng, actors, probs, scores, local_adv, state_weights, weights, bias, gamma, c_state


def prop3_exact_residual(seed: int) -> float:
    _, _, probs, scores, adv, d, w, b, gamma, c = prop3_fixture(seed)
    return prop3_exact(d, probs, scores, adv, w, b, gamma, c)


def prop3_monte_carlo(seed: int, samples: int = 100_000) -> dict:
    """On-policy samples: empirical identity residual and the score-term z-scores."""
    rng, actors, probs, _, adv, d, w, b, gamma, c = prop3_fixture(seed)
    n_states = len(d)
    s = rng.choice(n_states, size=samples, p=d)
    obs = np.eye(n_states)[s]
    acts = [a.sample(obs, rng)[0] for a in actors]
    scores = [a.score(obs, x) for a, x in zip(actors, acts)]
    local = np.stack([adv[i][s, acts[i]] for i in range(2)], axis=1)
    const = c[s] * (1.0 - gamma) * b
    global_adv = local @ w + const
    res = prop3_empirical(scores, global_adv, local, w, const)
    per_sample = np.concatenate([sc * const[:, None] for sc in scores], axis=1)
    se = per_sample.std(axis=0, ddof=1) / np.sqrt(samples)
    z = np.where(se > 0, res["score_term"] / np.where(se > 0, se, 1.0), 0.0)
    return {"residual": res["residual"], "score_term_max_abs_z": float(np.max(np.abs(z))), "samples": samples}


def check_prop3(seeds=range(5), samples: int = 100_000) -> CheckResult:
    t = time.perf_counter()
    exact = [prop3_exact_residual(s) for s in seeds]
    mc = prop3_monte_carlo(0, samples)
    passed = max(exact) < 1e-10 and mc["residual"] < 1e-8 and mc["score_term_max_abs_z"] < 3.0
    return CheckResult(
        "prop3",
        passed,
        {"max_exact_residual": max(exact), "monte_carlo": mc},
        time.perf_counter() - t,
    )


# --- oracles -------------------------------------------------------------------


def soft_value_fixture(seed: int = 3, beta: float = 1.0):
    env = TabularMdpEnv(random_tabular_mdp(seed, deterministic=True))
    model = ImplicitRewardModel(env.spec, (64, 64), beta=beta, rng=np.random.default_rng(seed))
    for net in model.local_q:
        net.params *= 3.0
    return env, model


def check_soft_value(steps: int = 2000) -> CheckResult:
    t = time.perf_counter()
    env, model = soft_value_fixture()
    before = soft_value_oracle(model, env)
    fit_soft_value(model, env, steps)
    after = soft_value_oracle(model, env)
    return CheckResult(
        "soft_value",
        after < 1e-3,
        {"steps": steps, "deviation_before": before, "deviation_after": after},
        time.perf_counter() - t,
    )


def check_prop1_suite(shifts=(-10.0, 0.0, 1.0, 1000.0), fixtures=(0, 1, 2)) -> CheckResult:
    t = time.perf_counter()
    reports = []
    for seed in fixtures:
        mdp = random_tabular_mdp(seed)
        for c in shifts:
            reports.append({"fixture": seed, **check_prop1(mdp, c).__dict__})
    return CheckResult("prop1", all(r["passed"] for r in reports), {"reports": reports}, time.perf_counter() - t)


def check_theorem1(
    seeds=(0,), n_pairs=(10_000,), config: TheoremOneConfig | None = None
) -> CheckResult:
    """Centred deviation <= 10% of range and held-out accuracy within 5 points of Bayes
    at the largest N; with several N the per-N median deviation must not increase."""
    t = time.perf_counter()
    env = theorem1_fixture(0)
    table: dict[int, list] = {}
    for n in n_pairs:
        table[n] = [run_theorem1_harness(env, n, config, seed=s) for s in seeds]
    largest = table[max(n_pairs)]
    medians = [float(np.median([r.deviation_ratio for r in table[n]])) for n in sorted(n_pairs)]
    ok_dev = all(r.deviation_ratio <= 0.10 for r in largest)
    ok_acc = all(abs(r.heldout_accuracy - r.bayes_rate) <= 0.05 for r in largest)
    ok_mono = all(b <= a for a, b in zip(medians, medians[1:]))
    failed = [r.failed for rs in table.values() for r in rs if r.failed]
    details = {
        "median_deviation_ratio": dict(zip(sorted(n_pairs), medians)),
        "largest_n": {
            "deviation_ratio": [r.deviation_ratio for r in largest],
            "heldout_accuracy": [r.heldout_accuracy for r in largest],
            "bayes_rate": [r.bayes_rate for r in largest],
        },
        "failures": failed,
    }
    return CheckResult("theorem1", ok_dev and ok_acc and ok_mono and not failed, details, time.perf_counter() - t)


def run_checks(only=None, report_dir=None, fixture=None) -> list[CheckResult]:
    names = [only] if only else list(CHECKS)
    runners = {
        "gradients": lambda: check_gradients(range(3)),
        "prop1": check_prop1_suite,
        "prop2": lambda: check_prop2(fixture=fixture),
        "prop3": check_prop3,
        "soft_value": check_soft_value,
        "theorem1": check_theorem1,
    }
    results = []
    for name in names:
        res = runners[name]()
        results.append(res)
        if report_dir is not None:
            d = Path(report_dir)
            d.mkdir(parents=True, exist_ok=True)
            (d / f"{name}.json").write_text(json.dumps(res.to_dict(), indent=2) + "\n")
    return results
