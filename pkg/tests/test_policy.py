import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imap.envs import CoopMatrixGame
from imap.nn import Mlp, gradient_check
from imap.policy import (
    PolicyBundle,
    PpoConfig,
    actor_loss_dual,
    actor_loss_global,
    build_advantages,
    check_prop2,
    clipped_surrogate,
    critic_loss,
    gae,
    gae_global,
    local_delta,
    prop2_residual,
    prop3_empirical,
    prop3_exact,
    train_iteration,
)
from imap.reward_model import LinearMixer
from imap.verify import prop3_exact_residual, prop3_fixture

from conftest import small_setup


def test_gae_single_step():
    for lam in (0.0, 0.5, 1.0):
        assert gae([2.0], 0.9, lam)[0] == 2.0


def test_gae_hand_recursion():
    np.testing.assert_allclose(gae([1.0, 1.0], 0.5, 1.0), [1.5, 1.0])


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=12), st.floats(0, 1))
@settings(max_examples=50, deadline=None)
def test_gae_lambda_zero_collapse(deltas, gamma):
    assert np.array_equal(gae(deltas, gamma, 0.0), np.asarray(deltas))


def test_gae_resets_at_done():
    adv = gae([1.0, 1.0, 1.0], 1.0, 1.0, done=[False, True, True])
    np.testing.assert_array_equal(adv, [2.0, 1.0, 1.0])


def test_gae_global_targets():
    adv, ret = gae_global([1.0], [0.5], [0.0], [True], 0.9, 0.95)
    assert adv[0] == 0.5 and ret[0] == 1.0


def test_local_delta_zero_value_change():
    r = np.array([[0.3, -0.2]])
    np.testing.assert_array_equal(local_delta(r, np.zeros(1), np.zeros(1), [0.7, 1.3], 0.99), r)


def test_local_delta_single_agent():
    r = np.array([[0.4]])
    d = local_delta(r, np.array([1.0]), np.array([2.0]), [1.0], 0.9)
    assert d[0, 0] == pytest.approx(0.4 + 0.9 * 2.0 - 1.0)


def test_local_delta_rejects_bad_weights():
    with pytest.raises(ValueError):
        local_delta(np.zeros((1, 2)), np.zeros(1), np.zeros(1), [0.0, 1.0], 0.9)


@pytest.mark.parametrize("seed", range(6))
def test_prop2_identity(seed):
    _, bundle, model, batch = small_setup(seed)
    tr = batch.trajectories[0]
    assert check_prop2(model, bundle.critic, tr) < 1e-10
    assert check_prop2(model, bundle.critic, tr, lam=0.0) < 1e-10
    assert check_prop2(model, bundle.critic, tr, uncorrected=True) > 1e-3


def test_prop2_zero_bias():
    _, bundle, model, batch = small_setup(3)
    model.mixer.bias[0] = 0.0
    assert check_prop2(model, bundle.critic, batch.trajectories[1]) < 1e-10


def test_single_agent_local_equals_global():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(5, 1))
    v, v2 = rng.normal(size=5), rng.normal(size=5)
    v2[-1] = 0.0
    done = np.array([False] * 4 + [True])
    glob, _ = gae_global(r[:, 0], v, v2, done, 0.99, 0.95)
    loc = gae(local_delta(r, v, v2, [1.0], 0.99), 0.99, 0.95, done)
    np.testing.assert_allclose(loc[:, 0], glob, atol=1e-14)


def test_surrogate_unit_ratio():
    adv = np.array([1.0, -2.0, 0.5])
    surr, _ = clipped_surrogate(np.zeros(3), np.zeros(3), adv, 0.2)
    assert -surr.mean() == pytest.approx(-adv.mean())


def test_surrogate_clip_branch():
    surr, grad = clipped_surrogate(np.array([np.log(2.0)]), np.zeros(1), np.array([3.0]), 0.2)
    assert surr[0] == pytest.approx(1.2 * 3.0) and grad[0] == 0.0


@given(st.floats(-3, 3), st.floats(-5, 5))
@settings(max_examples=80, deadline=None)
def test_surrogate_clip_bounds(logr, adv):
    surr, _ = clipped_surrogate(np.array([logr]), np.zeros(1), np.array([adv]), 0.2)
    if adv > 0:
        assert surr[0] <= 1.2 * adv + 1e-12
    elif adv < 0:
        assert surr[0] <= 0.8 * adv + 1e-12


def test_actor_loss_scales_with_advantages():
    _, bundle, _, batch = small_setup(0)
    bundle.config.entropy_coef = 0.0
    flat = batch.flat
    adv = np.random.default_rng(1).normal(size=(len(flat), 2))
    a = actor_loss_dual(bundle, flat, adv, standardize_adv=False).loss
    b = actor_loss_dual(bundle, flat, 3.0 * adv, standardize_adv=False).loss
    assert b == pytest.approx(3.0 * a, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_actor_gradients(seed):
    _, bundle, _, batch = small_setup(seed)
    flat = batch.flat
    # perturb the policy so ratios differ from one and some samples clip
    for a in bundle.actors:
        a.net.params += np.random.default_rng(seed).normal(0, 0.3, a.net.params.shape)
    adv = np.random.default_rng(seed + 10).normal(size=(len(flat), 2))
    params = {f"actor{i}.net": a.net.params for i, a in enumerate(bundle.actors)}
    for fn in (
        lambda: actor_loss_dual(bundle, flat, adv, standardize_adv=True),
        lambda: actor_loss_global(bundle, flat, adv[:, 0], standardize_adv=True),
    ):
        res = fn()
        assert gradient_check(lambda: fn().loss, res.grads, params, max_coords=12, rng=np.random.default_rng(seed)) < 1e-4


def test_critic_loss_examples():
    _, bundle, _, batch = small_setup(0)
    obs = batch.flat.joint_obs
    v = bundle.values(obs)
    assert critic_loss(bundle, obs, v, v).loss == 0.0
    eps = bundle.config.value_clip
    res = critic_loss(bundle, obs, v - 2 * eps, v - 2 * eps)
    # V = V_old + 2 eps, target = V_old: unclipped error (2 eps)^2 beats clipped eps^2
    assert res.loss == pytest.approx(4 * eps**2)


@pytest.mark.parametrize("seed", range(3))
def test_critic_gradient(seed):
    _, bundle, _, batch = small_setup(seed)
    obs = batch.flat.joint_obs
    rng = np.random.default_rng(seed)
    v = bundle.values(obs)
    old = v + rng.normal(0, 0.3, len(v))
    targets = v + rng.normal(0, 1.0, len(v))
    res = critic_loss(bundle, obs, targets, old)
    err = gradient_check(lambda: critic_loss(bundle, obs, targets, old).loss, res.grads, {"critic": bundle.critic.params}, max_coords=20, rng=rng)
    assert err < 1e-4


def test_prop3_single_agent_collapse():
    # one agent: joint gradient equals the local one when the bias is zero
    rng = np.random.default_rng(0)
    scores = [rng.normal(size=(50, 4))]
    adv = rng.normal(size=(50, 1))
    res = prop3_empirical(scores, adv[:, 0], adv, [1.0], np.zeros(50))
    assert res["residual"] < 1e-12 and np.all(res["cross_term"] == 0)


@pytest.mark.parametrize("seed", range(5))
def test_prop3_exact(seed):
    assert prop3_exact_residual(seed) < 1e-10


def test_prop3_constant_does_not_change_direction():
    _, _, probs, scores, adv, d, w, b, gamma, c = prop3_fixture(1)
    assert prop3_exact(d, probs, scores, adv, w, b, gamma, c) < 1e-10

    def joint_gradient(bias):
        const = c * (1.0 - gamma) * bias
        a_tot = w[0] * adv[0][:, :, None] + w[1] * adv[1][:, None, :] + const[:, None, None]
        joint = probs[0][:, :, None] * probs[1][:, None, :] * d[:, None, None]
        return np.concatenate([
            np.einsum("sab,sap,sab->p", joint, scores[0], a_tot),
            np.einsum("sab,sbp,sab->p", joint, scores[1], a_tot),
        ])

    np.testing.assert_allclose(joint_gradient(b), joint_gradient(0.0), atol=1e-12)
    np.testing.assert_allclose(joint_gradient(50.0), joint_gradient(0.0), atol=1e-12)


def test_lr_zero_leaves_bundle():
    _, bundle, model, batch = small_setup(0)
    for opt in bundle.actor_opts + [bundle.critic_opt]:
        opt.lr = 0.0
    before = {k: v.copy() for k, v in bundle.parameters().items()}
    R, r = model.rewards(batch.flat)
    _, metrics = train_iteration(bundle, batch.flat, R, np.random.default_rng(0), r, model.mixer.weights(), model.mixer.bias[0])
    for k, v in bundle.parameters().items():
        np.testing.assert_array_equal(v, before[k])
    assert np.isfinite(metrics["actor_loss"]) and np.isfinite(metrics["entropy"])


def test_entropy_only_objective_raises_entropy():
    _, bundle, model, batch = small_setup(0)
    for a in bundle.actors:
        a.net.params += np.random.default_rng(5).normal(0, 0.5, a.net.params.shape)
    flat = batch.flat
    ent = lambda: np.mean([a.evaluate(flat.local_obs[i], flat.actions[i])[1].mean() for i, a in enumerate(bundle.actors)])
    start = ent()
    R, _ = model.rewards(flat)
    train_iteration(bundle, flat, R, np.random.default_rng(0), zero_advantages=True)
    assert ent() >= start


def test_build_advantages_dual_and_residual():
    _, bundle, model, batch = small_setup(2)
    R, r = model.rewards(batch.flat)
    table = build_advantages(bundle, batch.flat, R, r, model.mixer.weights(), model.mixer.bias[0])
    assert table.local_adv.shape == (len(batch.flat), 2)
    assert table.prop2_residual < 1e-8


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(clip=0.0)
    with pytest.raises(ValueError):
        PpoConfig(gamma=1.5)
