import numpy as np
import pytest

from millstream.tinynn import (
    Adam,
    Network,
    NetworkSpec,
    OptimizerConfig,
    Parameters,
    Sgd,
    bce_loss,
    deserialize_parameters,
    init_parameters,
    serialize_parameters,
)


def finite_difference(loss_fn, params: Parameters, h=1e-5):
    """Central differences over the flattened parameter vector."""
    flat = params.flat()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        params.set_flat(bumped)
        up = loss_fn()
        bumped[i] -= 2 * h
        params.set_flat(bumped)
        down = loss_fn()
        grad[i] = (up - down) / (2 * h)
    params.set_flat(flat)
    return grad


def test_identity_linear_layer():
    spec = NetworkSpec((3, 3), output_activation="linear")
    net = Network(spec, Parameters([np.eye(3)], [np.zeros(3)]))
    x = np.array([1.0, -2.0, 0.5])
    out, _ = net.forward(x)
    assert np.allclose(out, x)


def test_zero_weights_sigmoid_gives_half():
    spec = NetworkSpec((4, 2), output_activation="sigmoid")
    net = Network(spec, Parameters([np.zeros((2, 4))], [np.zeros(2)]))
    out, _ = net.forward(np.array([3.0, 1.0, -9.0, 2.0]))
    assert np.allclose(out, 0.5)


def test_forward_matches_matmul_oracle():
    spec = NetworkSpec((4, 8, 2), hidden_activation="tanh", output_activation="sigmoid", seed=3)
    net = Network(spec)
    rng = np.random.default_rng(0)
    x = rng.normal(size=4)
    h = np.tanh(net.params.weights[0] @ x + net.params.biases[0])
    z = net.params.weights[1] @ h + net.params.biases[1]
    want = 1.0 / (1.0 + np.exp(-z))
    out, _ = net.forward(x)
    assert np.allclose(out, want, atol=1e-14)


def test_forward_shape_mismatch():
    net = Network(NetworkSpec((3, 2)))
    with pytest.raises(ValueError):
        net.forward(np.zeros(4))


def test_linear_squared_loss_closed_form():
    spec = NetworkSpec((2, 1), output_activation="linear", seed=1)
    net = Network(spec)
    x = np.array([0.7, -1.2])
    y = 0.3
    out, cache = net.forward(x)
    grads, _ = net.backward(cache, np.array([2.0 * (out[0] - y)]))
    w = net.params.weights[0]
    want_w = 2.0 * (w @ x + net.params.biases[0] - y) * x
    assert np.allclose(grads.weights[0], want_w[None, :])


def test_zero_loss_gradient_gives_zero_parameter_gradients():
    net = Network(NetworkSpec((3, 5, 2), seed=2))
    _, cache = net.forward(np.ones(3))
    grads, _ = net.backward(cache, np.zeros(2))
    assert all(np.all(g == 0) for g in grads.weights + grads.biases)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_check_random_configs(seed):
    rng = np.random.default_rng(seed)
    sizes = (int(rng.integers(2, 5)), int(rng.integers(2, 7)), int(rng.integers(1, 4)))
    hidden = ["relu", "tanh", "sigmoid"][seed % 3]
    out_act = ["linear", "sigmoid", "tanh"][seed % 3]
    spec = NetworkSpec(sizes, hidden, out_act, seed=seed)
    net = Network(spec)
    x = rng.normal(size=(3, sizes[0]))
    target = rng.normal(size=(3, sizes[-1]))

    def loss_fn():
        out, _ = net.forward(x)
        return float(np.sum((out - target) ** 2))

    out, cache = net.forward(x)
    grads, _ = net.backward(cache, 2.0 * (out - target))
    got = np.concatenate(
        [g.ravel() for g in grads.weights] + [g.ravel() for g in grads.biases]
    )
    ordered = Parameters(grads.weights, grads.biases).flat()
    want = finite_difference(loss_fn, net.params)
    denom = np.maximum(np.abs(want), 1e-6)
    assert np.max(np.abs(ordered - want) / denom) < 1e-4


def test_backward_rejects_bad_gradient_shape():
    net = Network(NetworkSpec((3, 2)))
    _, cache = net.forward(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        net.backward(cache, np.zeros((4, 3)))


def test_sgd_arithmetic():
    params = Parameters([np.array([[1.0]])], [np.array([0.0])])
    grads = Parameters([np.array([[0.5]])], [np.array([0.0])])
    Sgd(OptimizerConfig(kind="sgd", learning_rate=0.1)).step(params, grads)
    assert params.weights[0][0, 0] == pytest.approx(0.95)


def test_sgd_zero_gradient_no_change():
    params = Parameters([np.array([[1.0, 2.0]])], [np.array([3.0])])
    grads = Parameters.zeros_like(params)
    Sgd(OptimizerConfig(kind="sgd", learning_rate=0.5)).step(params, grads)
    assert params.weights[0].tolist() == [[1.0, 2.0]]
    assert params.biases[0].tolist() == [3.0]


def test_adam_first_step_matches_hand_recurrence():
    cfg = OptimizerConfig(kind="adam", learning_rate=0.01)
    params = Parameters([np.array([[1.0]])], [np.array([0.0])])
    grads = Parameters([np.array([[0.3]])], [np.array([0.0])])
    Adam(cfg).step(params, grads)
    # first step: m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps) ~ lr
    want = 1.0 - 0.01 * 0.3 / (np.sqrt(0.3**2) + cfg.epsilon)
    assert params.weights[0][0, 0] == pytest.approx(want, rel=1e-12)


def test_adam_shape_mismatch():
    params = Parameters([np.zeros((2, 2))], [np.zeros(2)])
    grads = Parameters([np.zeros((2, 3))], [np.zeros(2)])
    with pytest.raises(ValueError):
        Adam(OptimizerConfig()).step(params, grads)


def test_seeded_init_is_deterministic():
    spec = NetworkSpec((5, 4, 2), seed=9)
    a, b = init_parameters(spec), init_parameters(spec)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))


def test_training_determinism():
    def train():
        spec = NetworkSpec((2, 4, 1), output_activation="sigmoid", seed=5)
        net = Network(spec)
        opt = Adam(OptimizerConfig(learning_rate=0.01))
        rng = np.random.default_rng(0)
        x = rng.normal(size=(20, 2))
        y = (x[:, 0] > 0).astype(float)[:, None]
        for _ in range(50):
            out, cache = net.forward(x)
            grads, _ = net.backward(cache, (out - y) / 20, grad_is_preactivation=True)
            opt.step(net.params, grads)
        return net.params.flat()

    assert np.array_equal(train(), train())


def test_loss_monotonicity_smoke():
    rng = np.random.default_rng(8)
    x = np.vstack([rng.normal(loc=-2.0, size=(40, 2)), rng.normal(loc=2.0, size=(40, 2))])
    y = np.concatenate([np.zeros(40), np.ones(40)])[:, None]
    net = Network(NetworkSpec((2, 1), output_activation="sigmoid", seed=0))
    opt = Sgd(OptimizerConfig(kind="sgd", learning_rate=0.5))
    out, _ = net.forward(x)
    before = bce_loss(out, y)
    for _ in range(200):
        out, cache = net.forward(x)
        grads, _ = net.backward(cache, (out - y) / x.shape[0], grad_is_preactivation=True)
        opt.step(net.params, grads)
    out, _ = net.forward(x)
    after = bce_loss(out, y)
    assert after <= 0.5 * before


def test_serialization_round_trip():
    spec = NetworkSpec((3, 4, 2), "relu", "sigmoid", seed=11)
    net = Network(spec)
    text = serialize_parameters(spec, net.params)
    spec2, params2 = deserialize_parameters(text)
    assert spec2 == spec
    assert np.array_equal(params2.flat(), net.params.flat())
