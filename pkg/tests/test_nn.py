import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etcrl import nn
from etcrl.nn import AdamState, Mlp, NonFiniteError, adam_step, backward, forward, gradient_check, soft_update


def random_net(seed, hidden="tanh", out="linear", sizes=(3, 5, 4, 2)):
    return Mlp(sizes, hidden, out, rng=np.random.default_rng(seed))


def test_zero_net_gives_zero_output():
    net = Mlp([4, 6, 3])
    x = np.random.default_rng(0).normal(size=(5, 4))
    assert np.array_equal(net(x), np.zeros((5, 3)))


def test_identity_layer():
    net = Mlp([3, 3])
    net.weights[0][...] = np.eye(3)
    v = np.array([0.5, -2.0, 3.0])
    np.testing.assert_array_equal(net(v)[0], v)


def test_hand_computed_forward():
    net = Mlp([2, 2, 1], "tanh", "sigmoid", output_scale=3.0)
    W1 = np.array([[0.1, -0.3], [0.2, 0.4]])
    b1 = np.array([0.05, -0.1])
    W2 = np.array([[0.7], [-0.5]])
    b2 = np.array([0.2])
    net.set_params(np.concatenate([W1.ravel(), b1, W2.ravel(), b2]))
    x1, x2 = 1.0, 2.0
    h1 = np.tanh(0.1 * x1 + 0.2 * x2 + 0.05)
    h2 = np.tanh(-0.3 * x1 + 0.4 * x2 - 0.1)
    z = 0.7 * h1 - 0.5 * h2 + 0.2
    expected = 3.0 / (1.0 + np.exp(-z))
    assert net([x1, x2])[0, 0] == pytest.approx(expected, rel=1e-14)


def test_forward_rejects_wrong_width():
    with pytest.raises(ValueError):
        forward(Mlp([3, 2]), np.zeros((1, 4)))


def test_forward_is_deterministic():
    net = random_net(1)
    x = np.random.default_rng(2).normal(size=(7, 3))
    assert forward(net, x)[0].tobytes() == forward(net, x)[0].tobytes()


def test_linear_backward():
    net = Mlp([3, 1])
    w = np.array([0.3, -1.0, 2.0])
    net.weights[0][:, 0] = w
    x = np.array([[1.5, 2.0, -0.5]])
    _, cache = forward(net, x)
    g, gx = backward(net, cache, np.ones((1, 1)))
    np.testing.assert_allclose(gx[0], w)
    np.testing.assert_allclose(net.unflatten(g)[0][0][:, 0], x[0])
    assert net.unflatten(g)[0][1][0] == 1.0


def test_relu_blocks_gradient_of_inactive_unit():
    net = Mlp([1, 2, 1], "relu")
    net.weights[0][...] = [[1.0, -1.0]]
    net.weights[1][...] = [[1.0], [1.0]]
    _, cache = forward(net, np.array([[2.0]]))  # second hidden unit pre-activation -2
    g, _ = backward(net, cache, np.ones((1, 1)))
    (W1, b1), (W2, _) = net.unflatten(g)
    assert W1[0, 1] == 0.0 and b1[1] == 0.0 and W2[1, 0] == 0.0
    assert W1[0, 0] == 2.0


def test_stale_cache_rejected():
    net = random_net(3)
    _, cache = forward(net, np.ones((1, 3)))
    net.set_params(net.theta + 0.1)
    with pytest.raises(ValueError):
        backward(net, cache, np.ones((1, 2)))
    with pytest.raises(ValueError):
        backward(random_net(3), cache, np.ones((1, 2)))


def test_backward_skip_flags():
    net = random_net(4)
    _, cache = forward(net, np.ones((2, 3)))
    g_full, x_full = backward(net, cache, np.ones((2, 2)))
    g, gx = backward(net, cache, np.ones((2, 2)), input_grad=False)
    assert gx is None and np.array_equal(g, g_full)
    g, gx = backward(net, cache, np.ones((2, 2)), param_grads=False)
    assert g is None and np.array_equal(gx, x_full)


def test_gradient_check_examples():
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert gradient_check(random_net(0, "tanh", "linear", (3, 2)), x) < 1e-8
    assert gradient_check(random_net(0, "tanh", "tanh"), x) < 1e-4
    assert gradient_check(random_net(0, "relu", "linear"), x) < 1e-4


@pytest.mark.parametrize("hidden", ["relu", "tanh"])
@pytest.mark.parametrize("out", ["linear", "tanh", "sigmoid"])
def test_gradient_check_over_100_seeds(hidden, out):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        sizes = (int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 4)))
        net = Mlp(sizes, hidden, out, output_scale=rng.uniform(0.5, 2.0, sizes[-1]), rng=rng)
        x = rng.normal(size=(3, sizes[0]))
        worst = max(worst, gradient_check(net, x, rng=rng))
    assert worst < 1e-4


def test_gradient_check_mixed_heads():
    net = Mlp([3, 8, 3], "relu", ("linear", "linear", "tanh"), (1.0, 1.0, 2.0), np.random.default_rng(5))
    assert gradient_check(net, np.random.default_rng(6).normal(size=(5, 3))) < 1e-4


def test_gradient_check_restores_params():
    net = random_net(7)
    before = net.theta.copy()
    gradient_check(net, np.ones((2, 3)))
    assert np.array_equal(net.theta, before)
    with pytest.raises(ValueError):
        gradient_check(net, np.ones((2, 3)), eps=0.0)


def test_adam_first_step_equals_lr():
    p = np.zeros(1)
    adam_step(p, np.ones(1), AdamState(1, lr=0.001))
    assert p[0] == pytest.approx(-0.001, rel=1e-6)


def test_adam_zero_grad_is_identity():
    net = random_net(8)
    before = net.theta.copy()
    state = AdamState(net.theta.size)
    for _ in range(3):
        adam_step(net, np.zeros_like(net.theta), state)
    assert np.array_equal(net.theta, before)
    assert state.step == 3


def test_adam_descends_monotonically():
    p = np.array([1.0])
    state = AdamState(1, lr=1e-3)
    values = []
    for _ in range(50):
        adam_step(p, np.ones(1), state)
        values.append(p[0])
    assert np.all(np.diff(values) < 0)


def test_adam_rejects_non_finite():
    with pytest.raises(NonFiniteError, match="non-finite gradient"):
        adam_step(np.zeros(3), np.array([0.0, np.nan, 1.0]), AdamState(3))


def test_adam_invalidates_cache():
    net = random_net(9)
    _, cache = forward(net, np.ones((1, 3)))
    adam_step(net, np.ones_like(net.theta), AdamState(net.theta.size))
    with pytest.raises(ValueError):
        backward(net, cache, np.ones((1, 2)))


def test_soft_update_examples():
    online, target = random_net(10), random_net(11)
    keep = target.theta.copy()
    soft_update(target, online, 0.0)
    assert np.array_equal(target.theta, keep)
    soft_update(target, online, 1.0)
    assert np.array_equal(target.theta, online.theta)
    a, b = Mlp([1, 1]), Mlp([1, 1])
    a.set_params([2.0, 2.0])
    soft_update(b, a, 0.5)
    np.testing.assert_array_equal(b.theta, [1.0, 1.0])


def test_soft_update_rejects_mismatch():
    with pytest.raises(ValueError):
        soft_update(Mlp([2, 3]), Mlp([2, 4]), 0.1)
    with pytest.raises(ValueError):
        soft_update(Mlp([2, 3]), Mlp([2, 3]), 1.5)


@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_soft_update_composition(kappa, seed):
    online, t1 = random_net(seed), random_net(seed + 1)
    t2 = t1.copy()
    soft_update(t1, online, kappa)
    soft_update(t1, online, kappa)
    soft_update(t2, online, 1.0 - (1.0 - kappa) ** 2)
    np.testing.assert_allclose(t1.theta, t2.theta, rtol=1e-12, atol=1e-12)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = Mlp([3, 4, 3], "relu", ("linear", "linear", "tanh"), (1.0, 1.0, 2.0), np.random.default_rng(0))
    nn.save(net, tmp_path / "n.etcrl")
    back = nn.load(tmp_path / "n.etcrl")
    assert back.architecture() == net.architecture()
    assert back.theta.tobytes() == net.theta.tobytes()
    assert nn.dumps(back) == nn.dumps(net)


def test_checkpoint_layout():
    net = Mlp([2, 1], "tanh", "sigmoid")
    net.set_params([1.0, 2.0, 3.0])
    blob = nn.dumps(net)
    assert blob[:6] == b"ETCRL1"
    assert struct.unpack_from("<I", blob, 6) == (2,)
    assert struct.unpack_from("<2I", blob, 10) == (2, 1)
    assert blob[18] == nn.ACTIVATIONS.index("tanh") and blob[19] == nn.ACTIVATIONS.index("sigmoid")
    assert struct.unpack_from("<d", blob, 20) == (1.0,)  # output scale
    assert struct.unpack_from("<3d", blob, 28) == (1.0, 2.0, 3.0)
    assert len(blob) == 52


def test_checkpoint_rejects_corruption():
    blob = nn.dumps(random_net(0))
    with pytest.raises(ValueError):
        nn.loads(b"XXXXXX" + blob[6:])
    with pytest.raises(ValueError):
        nn.loads(blob + b"\0")
    with pytest.raises((ValueError, struct.error)):
        nn.loads(blob[:-8])


def test_constructor_validation():
    with pytest.raises(ValueError):
        Mlp([3])
    with pytest.raises(ValueError):
        Mlp([3, 2], hidden_activation="sigmoid")
    with pytest.raises(ValueError):
        Mlp([3, 2], output_activation=("linear",))
    with pytest.raises(ValueError):
        Mlp([3, 2], output_activation="relu")


def test_init_uniform_bounds():
    net = Mlp([16, 4, 2], rng=np.random.default_rng(0))
    assert np.abs(net.weights[0]).max() <= 0.25
    assert np.abs(net.weights[1]).max() <= 0.5
