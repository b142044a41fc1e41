import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imap.nn import (
    Adam,
    CheckpointError,
    Mlp,
    ShapeError,
    TapeError,
    decode_blocks,
    encode_blocks,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
)

from conftest import load_fixture


def test_zero_net_gives_zero():
    net = Mlp((3, 5, 2))
    assert np.array_equal(net(np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_identity_net():
    net = Mlp.identity(4)
    x = np.array([0.1, -3.0, 2.5, 7.0])
    assert np.array_equal(net(x), x)


def test_seed42_golden_vector():
    fx = load_fixture("mlp_seed42.json")
    net = Mlp(fx["sizes"], np.random.default_rng(42))
    np.testing.assert_allclose(net(np.array(fx["input"])), fx["output"], rtol=0, atol=1e-12)


def test_forward_is_pure():
    net = Mlp((3, 6, 2), np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(5, 3))
    assert np.array_equal(net(x), net(x))


def test_wrong_width_rejected():
    with pytest.raises(ShapeError):
        Mlp((3, 2), np.random.default_rng(0))(np.ones(4))


def test_backward_needs_tape():
    net = Mlp((2, 2), np.random.default_rng(0))
    other = Mlp((2, 2), np.random.default_rng(1))
    _, tape = other.record(np.ones(2))
    with pytest.raises(TapeError):
        net.backward(tape, np.ones(2))
    with pytest.raises(TapeError):
        net.backward(None, np.ones(2))


def test_constant_objective_zero_gradient():
    net = Mlp((3, 4, 1), np.random.default_rng(0))
    _, tape = net.record(np.ones((2, 3)))
    assert np.array_equal(net.backward(tape, np.zeros((2, 1))), np.zeros(net.n_params))


def test_linear_gradient_is_input():
    net = Mlp((3, 1))
    x = np.array([0.5, -2.0, 4.0])
    _, tape = net.record(x)
    g = net.backward(tape, np.ones(1))
    # weights first (3x1), then the bias
    np.testing.assert_array_equal(g, np.concatenate([x, [1.0]]))


@pytest.mark.parametrize("seed", range(4))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = Mlp((4, 7, 5, 2), rng)
    x = rng.normal(size=(6, 4))
    target = rng.normal(size=(6, 2))

    def loss():
        return float(np.sum((net(x) - target) ** 2 * 0.5))

    out, tape = net.record(x)
    grads = {"p": net.backward(tape, out - target)}
    assert gradient_check(loss, grads, {"p": net.params}) < 1e-4


def test_per_sample_gradients_sum_to_batch_gradient():
    rng = np.random.default_rng(3)
    net = Mlp((3, 4, 2), rng)
    x = rng.normal(size=(5, 3))
    up = rng.normal(size=(5, 2))
    _, tape = net.record(x)
    total = net.backward(tape, up)
    _, tape = net.record(x)
    rows = net.backward(tape, up, per_sample=True)
    np.testing.assert_allclose(rows.sum(axis=0), total, atol=1e-12)


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(p, 0.1)
    opt.step({"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


@given(st.lists(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3), min_size=1, max_size=5))
@settings(max_examples=50, deadline=None)
def test_adam_first_step_moves_by_lr(g):
    p = {"w": np.zeros(len(g))}
    Adam(p, 0.01).step({"w": np.array(g)})
    np.testing.assert_allclose(np.abs(p["w"]), 0.01, rtol=1e-4)


def test_adam_lr_zero_is_identity():
    p = {"w": np.array([0.3, 0.7])}
    Adam(p, 0.0).step({"w": np.array([5.0, -1.0])})
    np.testing.assert_array_equal(p["w"], [0.3, 0.7])


def test_adam_quadratic_recursion():
    p = {"w": np.array([1.0])}
    opt = Adam(p, 0.1)
    for _ in range(100):
        opt.step({"w": 2.0 * p["w"]})
    # independent scalar recursion of the same update
    w, m, v = 1.0, 0.0, 0.0
    for t in range(1, 101):
        g = 2.0 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert abs(p["w"][0]) < 0.05
    assert p["w"][0] == pytest.approx(w, abs=1e-12)


def test_adam_rejects_nonfinite():
    p = {"w": np.array([1.0])}
    opt = Adam(p, 0.1)
    assert opt.step({"w": np.array([np.nan])}) is False
    assert p["w"][0] == 1.0 and opt.skipped == 1


def test_adam_clips_global_norm():
    p = {"a": np.zeros(2), "b": np.zeros(2)}
    opt = Adam(p, 1.0, max_grad_norm=1.0)
    g = {"a": np.array([30.0, 40.0]), "b": np.zeros(2)}
    opt.step(g)
    # clipping happened on a copy; caller's gradient is untouched
    assert g["a"][0] == 30.0


@given(
    st.dictionaries(
        st.text(min_size=1, max_size=12),
        st.lists(st.floats(allow_nan=False, allow_infinity=False), max_size=6),
        max_size=4,
    )
)
@settings(max_examples=50, deadline=None)
def test_checkpoint_codec_roundtrip(blocks):
    arrays = {k: np.array(v, dtype=np.float64) for k, v in blocks.items()}
    data = encode_blocks(arrays)
    back = decode_blocks(data)
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    assert encode_blocks(back) == data


def test_checkpoint_file_roundtrip(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"x": np.arange(3.0)})
    np.testing.assert_array_equal(load_checkpoint(path)["x"], [0.0, 1.0, 2.0])


def test_checkpoint_bad_magic():
    data = bytearray(encode_blocks({"x": np.ones(2)}))
    data[0:1] = b"X"
    with pytest.raises(CheckpointError, match="magic"):
        decode_blocks(bytes(data))


def test_checkpoint_truncated():
    data = encode_blocks({"x": np.ones(4)})
    with pytest.raises(CheckpointError, match="truncated"):
        decode_blocks(data[:-5])


def test_checkpoint_version_mismatch():
    data = bytearray(encode_blocks({"x": np.ones(1)}))
    data[8] = 99
    with pytest.raises(CheckpointError, match="version"):
        decode_blocks(bytes(data))
