import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphine_rl import qnet
from morphine_rl.mdp import Normalizer
from morphine_rl.qnet import Architecture, QParams, adam_update, backward, forward

from conftest import grad_rel_error, numeric_grad

TINY = Architecture(n_inputs=2, hidden=2, stream_hidden=2, n_actions=2)


def tiny_net():
    return QParams(TINY, {
        "W1": np.array([[1.0, 0.0], [0.0, 1.0]]), "b1": np.zeros(2),
        "W2": np.array([[1.0, 1.0], [1.0, -1.0]]), "b2": np.array([0.0, 0.5]),
        "Wv1": np.eye(2), "bv1": np.array([0.0, -2.0]),
        "Wv2": np.array([[1.0], [1.0]]), "bv2": np.array([0.1]),
        "Wa1": np.array([[1.0, -1.0], [0.0, 1.0]]), "ba1": np.zeros(2),
        "Wa2": np.array([[1.0, 0.0], [0.0, 2.0]]), "ba2": np.array([0.0, 0.3]),
    })


def test_tiny_net_by_hand():
    # x = (1, -2)
    # h1 = lrelu(1, -2) = (1, -0.02)
    # h2 = lrelu(0.98, 1.02 + 0.5) = (0.98, 1.52)
    # value: hv = lrelu(0.98, -0.48) = (0.98, -0.0048); V = 0.9752 + 0.1 = 1.0752
    # advantage: ha = lrelu(0.98, -0.98 + 1.52) = (0.98, 0.54); A = (0.98, 1.38), mean 1.18
    # Q = V + A - mean(A) = (0.8752, 1.2752)
    out = forward(tiny_net(), np.array([1.0, -2.0]))
    assert out.value == pytest.approx([1.0752], abs=1e-12)
    assert out.advantage == pytest.approx([0.98, 1.38], abs=1e-12)
    assert out.q_values == pytest.approx([0.8752, 1.2752], abs=1e-12)


def test_zero_network_gives_zero_q():
    out = forward(qnet.zeros_params(), np.random.default_rng(0).normal(size=(4, 19)))
    assert np.all(out.q_values == 0)


def test_default_shapes():
    p = qnet.init_params(rng=0)
    shapes = {k: v.shape for k, v in p.params.items()}
    assert shapes["W1"] == (19, 64) and shapes["W2"] == (64, 64)
    assert shapes["Wv1"] == (64, 32) and shapes["Wv2"] == (32, 1)
    assert shapes["Wa1"] == (64, 32) and shapes["Wa2"] == (32, 14)
    assert p.m.shape == p.flat.shape == p.v.shape
    assert forward(p, np.zeros(19)).q_values.shape == (14,)


def test_init_is_fan_in_bounded():
    p = qnet.init_params(rng=3)
    assert np.abs(p["W1"]).max() <= 1 / np.sqrt(19)
    assert np.abs(p["W2"]).max() <= 1 / np.sqrt(64)
    assert np.abs(p["Wa2"]).max() <= 1 / np.sqrt(32)


def test_dimension_errors():
    p = qnet.init_params(rng=0)
    with pytest.raises(qnet.DimensionError):
        forward(p, np.zeros(18))
    with pytest.raises(qnet.DimensionError):
        QParams(Architecture(), {**p.params, "W1": np.zeros((18, 64))})


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-100, 100))
def test_advantage_bias_shift_leaves_q_unchanged(seed, c):
    p = qnet.init_params(rng=seed)
    x = np.random.default_rng(seed).normal(size=(5, 19))
    before = forward(p, x).q_values
    p["ba2"][:] += c
    assert np.max(np.abs(forward(p, x).q_values - before)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_centered_advantages_have_zero_mean(seed):
    p = qnet.init_params(rng=seed)
    out = forward(p, np.random.default_rng(seed).normal(size=(6, 19)))
    centered = out.q_values - out.value[:, None]
    assert np.max(np.abs(centered.mean(axis=1))) <= 1e-12


def test_forward_is_pure():
    p = qnet.init_params(rng=1)
    x = np.random.default_rng(2).normal(size=(3, 19))
    before = p.flat.copy()
    np.testing.assert_array_equal(forward(p, x).q_values, forward(p, x).q_values)
    np.testing.assert_array_equal(p.flat, before)


# -- gradients ------------------------------------------------------------------


@pytest.mark.parametrize("delta", [None, 1.0])
@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(seed, delta):
    rng = np.random.default_rng(seed)
    arch = Architecture(n_inputs=5, hidden=6, stream_hidden=4, n_actions=3)
    p = qnet.init_params(arch, rng)
    x = rng.normal(size=(5, 5))
    a = rng.integers(3, size=5)
    y = rng.normal(size=5) * 2
    w = rng.uniform(0.2, 1.0, size=5)
    out = forward(p, x)
    td = out.q_values[np.arange(5), a] - y
    g = qnet.flatten_grads(backward(p, out, a, td, w, delta))
    num = numeric_grad(p, lambda: qnet.weighted_loss(p, x, a, y, w, delta))
    assert grad_rel_error(g, num) < 1e-4


def test_zero_td_gives_zero_gradients():
    p = qnet.init_params(rng=0)
    x = np.random.default_rng(0).normal(size=(4, 19))
    g = backward(p, forward(p, x), [0, 1, 2, 3], np.zeros(4))
    assert all(np.all(v == 0) for v in g.values())


def test_is_weight_scales_gradients_linearly():
    p = qnet.init_params(rng=0)
    x = np.random.default_rng(0).normal(size=(1, 19))
    out = forward(p, x)
    g1 = qnet.flatten_grads(backward(p, out, [3], [0.4], [0.5]))
    g2 = qnet.flatten_grads(backward(p, out, [3], [0.4], [1.0]))
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-14, atol=0)


def test_huber_clips_large_errors():
    p = qnet.init_params(rng=0)
    out = forward(p, np.zeros((1, 19)))
    g5 = qnet.flatten_grads(backward(p, out, [0], [5.0], huber_delta=1.0))
    g1 = qnet.flatten_grads(backward(p, out, [0], [1.0], huber_delta=1.0))
    np.testing.assert_array_equal(g5, g1)
    sq = qnet.flatten_grads(backward(p, out, [0], [5.0], huber_delta=None))
    np.testing.assert_allclose(sq, 5 * g1, rtol=1e-10, atol=1e-15)


def test_stale_cache_detected():
    p = qnet.init_params(rng=0)
    out = forward(p, np.zeros((1, 19)))
    adam_update(p, backward(p, out, [0], [1.0]))
    with pytest.raises(qnet.StaleCacheError):
        backward(p, out, [0], [1.0])
    with pytest.raises(qnet.StaleCacheError):
        backward(qnet.copy_params(p), forward(p, np.zeros((1, 19))), [0], [1.0])


# -- Adam -----------------------------------------------------------------------


def test_adam_zero_gradient():
    p = qnet.init_params(rng=0)
    before = p.flat.copy()
    adam_update(p, np.zeros_like(p.flat))
    np.testing.assert_array_equal(p.flat, before)
    assert p.step == 1


def test_adam_first_step_is_lr_times_sign():
    p = qnet.init_params(rng=0)
    rng = np.random.default_rng(1)
    g = rng.choice([-1.0, 1.0], size=p.flat.size) * rng.uniform(0.1, 2.0, size=p.flat.size)
    before = p.flat.copy()
    adam_update(p, g, lr=1e-3)
    np.testing.assert_allclose(p.flat - before, -1e-3 * np.sign(g), rtol=1e-6)


def test_adam_three_hand_steps():
    # scalar recurrences with lr = 0.1 and gradients 1, -2, 0.5:
    #   t=1: m_hat = 1,       v_hat = 1       -> theta = -0.1
    #   t=2: m = -0.11, v = 0.004999; m_hat = -0.578947, v_hat = 2.500750 -> theta = -0.0633896
    #   t=3: m = -0.049, v = 0.005244; m_hat = -0.180812, v_hat = 1.749749 -> theta = -0.0497206
    p = qnet.zeros_params(TINY)
    seen = []
    for g0 in (1.0, -2.0, 0.5):
        g = np.zeros_like(p.flat)
        g[0] = g0
        adam_update(p, g, lr=0.1)
        seen.append(p.flat[0])
    assert seen == pytest.approx([-0.1, -0.0633896465, -0.0497205803], abs=1e-9)
    assert np.all(p.flat[1:] == 0)


def test_adam_rejects_non_finite():
    p = qnet.init_params(rng=0)
    g = {k: np.zeros_like(v) for k, v in p.params.items()}
    g["Wa1"][0, 0] = np.nan
    with pytest.raises(qnet.NumericalError, match="Wa1"):
        adam_update(p, g)
    assert p.step == 0


def test_adam_regression_converges():
    # two free parameters: the output biases, fit to a fixed Q target
    arch = Architecture(n_inputs=1, hidden=1, stream_hidden=1, n_actions=2)
    p = qnet.zeros_params(arch)
    x = np.zeros((2, 1))
    a = np.array([0, 1])
    y = np.array([0.7, -0.3])
    mask = np.zeros_like(p.flat)
    names = list(arch.shapes())
    offsets = np.cumsum([0] + [int(np.prod(s)) for s in arch.shapes().values()])
    for name in ("bv2", "ba2"):
        i = names.index(name)
        mask[offsets[i]:offsets[i + 1]] = 1
    for _ in range(1000):
        out = forward(p, x)
        td = out.q_values[np.arange(2), a] - y
        adam_update(p, qnet.flatten_grads(backward(p, out, a, td, huber_delta=None)) * mask, lr=0.05)
    assert qnet.weighted_loss(p, x, a, y, huber_delta=None) < 1e-6


# -- copies and checkpoints -----------------------------------------------------


def test_copy_is_independent():
    src = qnet.init_params(rng=0)
    cp = qnet.copy_params(src)
    x = np.random.default_rng(0).normal(size=(3, 19))
    np.testing.assert_array_equal(forward(cp, x).q_values, forward(src, x).q_values)
    src["W1"][0, 0] += 1
    assert not qnet.params_equal(src, cp)
    assert cp.step == 0 and not cp.m.any()


def test_online_drifts_from_copy():
    rng = np.random.default_rng(0)
    online = qnet.init_params(rng=rng)
    target = qnet.copy_params(online)
    probe = rng.normal(size=19)
    for _ in range(100):
        x = rng.normal(size=(8, 19))
        out = forward(online, x)
        adam_update(online, backward(online, out, rng.integers(14, size=8), rng.normal(size=8)), lr=1e-3)
    assert not np.allclose(forward(online, probe).q_values, forward(target, probe).q_values)


def test_checkpoint_round_trip(tmp_path):
    p = qnet.init_params(rng=5)
    norm = Normalizer(np.arange(19.0), np.ones(19) * 2)
    path = tmp_path / "m.ckpt"
    qnet.save_checkpoint(path, p, norm, {"note": "x"})
    ck = qnet.load_checkpoint(path)
    assert qnet.params_equal(ck.params, p)
    np.testing.assert_array_equal(ck.normalizer.mean, norm.mean)
    assert ck.meta == {"note": "x"}
    raw = path.read_bytes()
    assert raw[:8] == b"MRLQCKPT"
    assert int.from_bytes(raw[8:12], "little") == 1
    # arrays are float64 little-endian at the tail, in declared order
    tail = np.frombuffer(raw[-p.flat.size * 8:], dtype="<f8")
    np.testing.assert_array_equal(tail, p.flat)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        qnet.load_checkpoint(path)
