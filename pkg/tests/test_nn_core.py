import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trapnet import nn_core
from trapnet.errors import ConfigError, DegenerateError, NumericError, ShapeError
from trapnet.nn_core import Architecture, ModelParams

from gradcheck import check_network, random_network


def tiny_params():
    # 2 inputs -> 1 hidden unit -> 2 logits
    arch = Architecture(2, (1,), 2)
    layers = [
        (np.array([[1.0], [-2.0]]), np.array([0.5])),
        (np.array([[3.0, -1.0]]), np.array([0.0, 1.0])),
    ]
    return ModelParams(arch, layers)


def test_init_shapes():
    p = nn_core.init_model(Architecture(3, (4,), 2), seed=0)
    assert [w.shape for w, _ in p.layers] == [(3, 4), (4, 2)]
    assert [b.shape for _, b in p.layers] == [(4,), (2,)]
    assert all(not np.any(b) for _, b in p.layers)


def test_init_deterministic_and_seed_sensitive():
    arch = Architecture(5, (6, 3), 4)
    a, b = nn_core.init_model(arch, 7), nn_core.init_model(arch, 7)
    assert a.digest() == b.digest()
    assert nn_core.init_model(arch, 1).digest() != nn_core.init_model(arch, 2).digest()


def test_init_scale():
    p = nn_core.init_model(Architecture(400, (300,), 2), seed=3)
    w = p.layers[0][0]
    assert abs(w.mean()) < 0.01
    assert w.std() == pytest.approx(1 / math.sqrt(400), rel=0.05)


@pytest.mark.parametrize("kw", [dict(input_dim=0), dict(hidden_dims=(4, 0)), dict(hidden_dims=()), dict(num_classes=1)])
def test_bad_architecture(kw):
    base = dict(input_dim=3, hidden_dims=(4,), num_classes=2)
    with pytest.raises(ConfigError):
        Architecture(**{**base, **kw})


def test_forward_zero_weights():
    arch = Architecture(3, (4,), 5)
    p = ModelParams(arch, [(np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 5)), np.zeros(5))])
    assert not np.any(nn_core.logits(p, np.ones(3)))


def test_relu():
    assert nn_core.relu(np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]


def test_forward_hand_computed():
    p = tiny_params()
    # z1 = 1*0.3 - 2*0.1 + 0.5 = 0.6 -> h = 0.6; logits = (1.8, -0.6 + 1) = (1.8, 0.4)
    tr = nn_core.forward(p, np.array([0.3, 0.1]))
    assert tr.hidden == pytest.approx([0.6])
    assert tr.logits == pytest.approx([1.8, 0.4])
    # inactive unit: z1 = -2*1 + 0.5 < 0 -> logits are the output biases
    assert nn_core.logits(p, np.array([0.0, 1.0])) == pytest.approx([0.0, 1.0])


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        nn_core.forward(tiny_params(), np.zeros(3))


def test_forward_pure_and_hidden_recomputed():
    rng = np.random.default_rng(0)
    p = random_network(rng)
    x = rng.uniform(size=(4, p.arch.input_dim))
    before = p.digest()
    t1, t2 = nn_core.forward(p, x), nn_core.forward(p, x)
    assert p.digest() == before
    assert np.array_equal(t1.logits, t2.logits)
    a = x
    for w, b in p.layers[:-1]:
        a = np.maximum(a @ w + b, 0)
    assert np.array_equal(t1.hidden, a)


def test_xent_uniform():
    assert nn_core.xent_loss(np.zeros(7), 3) == pytest.approx(math.log(7))


def test_xent_stable():
    v = nn_core.xent_loss(np.array([1000.0, 0.0]), 0)
    assert math.isfinite(v) and v == pytest.approx(0.0, abs=1e-12)


def test_xent_value():
    expected = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    assert expected == pytest.approx(0.40761, abs=1e-5)
    assert nn_core.xent_loss(np.array([1.0, 2.0, 3.0]), 2) == pytest.approx(expected, rel=1e-12)


def test_xent_bad_label():
    with pytest.raises(IndexError):
        nn_core.xent_loss(np.zeros(3), 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_softmax_sums_to_one(z):
    assert np.sum(nn_core.softmax(np.array(z))) == pytest.approx(1.0, abs=1e-12)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(10):
        assert check_network(random_network(rng), rng) < 1e-4


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradients_property(seed):
    rng = np.random.default_rng(seed)
    assert check_network(random_network(rng, max_hidden=8), rng, batch=2) < 1e-4


def test_duplicate_batch_same_gradient():
    rng = np.random.default_rng(1)
    p = random_network(rng)
    x = rng.uniform(size=(1, p.arch.input_dim))
    g1 = nn_core.grad_params(p, x, [1])
    g2 = nn_core.grad_params(p, np.vstack([x, x]), [1, 1])
    for (a, b), (c, d) in zip(g1, g2):
        assert np.allclose(a, c, atol=1e-15) and np.allclose(b, d, atol=1e-15)


def test_zero_input_zero_first_layer_grad():
    p = nn_core.init_model(Architecture(4, (5,), 3), 0)
    g = nn_core.grad_params(p, np.zeros((2, 4)), [0, 2])
    assert not np.any(g[0][0])


def test_grad_params_shape_errors():
    p = tiny_params()
    with pytest.raises(ShapeError):
        nn_core.grad_params(p, np.zeros((2, 2)), [0])
    with pytest.raises(ShapeError):
        nn_core.grad_params(p, np.zeros((0, 2)), [])


def test_linear_input_gradient_closed_form():
    # all units active: logits = (x W1 + b1) W2 + b2, d xent/dx = W1 W2 (p - e_y)
    arch = Architecture(2, (2,), 2)
    w1 = np.array([[1.0, 0.5], [0.25, 2.0]])
    w2 = np.array([[1.0, -1.0], [0.5, 2.0]])
    p = ModelParams(arch, [(w1, np.ones(2)), (w2, np.zeros(2))])
    x = np.array([0.2, 0.4])
    z = (x @ w1 + 1) @ w2
    prob = np.exp(z) / np.exp(z).sum()
    expected = w1 @ w2 @ (prob - np.array([0.0, 1.0]))
    assert nn_core.grad_input_xent(p, x, 1) == pytest.approx(expected, rel=1e-12)


def test_input_gradient_dimensions():
    rng = np.random.default_rng(2)
    p = random_network(rng)
    x = rng.uniform(size=p.arch.input_dim)
    assert nn_core.grad_input_xent(p, x, 0).shape == (p.arch.input_dim,)
    phi = np.ones(p.arch.hidden_dim)
    h = nn_core.hidden(p, x)
    if np.any(h):
        assert nn_core.grad_input_detection(p, x, phi).shape == (p.arch.input_dim,)


def test_detection_gradient_scale_invariant():
    rng = np.random.default_rng(4)
    p = nn_core.init_model(Architecture(6, (10,), 3), 1)
    x = rng.uniform(size=(5, 6))
    phi = rng.uniform(size=10)
    assert np.allclose(
        nn_core.grad_input_detection(p, x, phi), nn_core.grad_input_detection(p, x, 10 * phi), rtol=1e-12, atol=0
    )


def test_detection_degenerate():
    p = tiny_params()
    x_dead = np.array([0.0, 1.0])  # hidden unit inactive
    with pytest.raises(DegenerateError):
        nn_core.grad_input_detection(p, x_dead, np.ones(1))
    with pytest.raises(DegenerateError):
        nn_core.grad_input_detection(p, np.array([0.3, 0.1]), np.zeros(1))
    score, g, degen = nn_core.detection_and_input_grad(p, x_dead, np.ones(1))
    assert score == -1.0 and degen and not np.any(g)


def test_sgd_step():
    arch = Architecture(1, (1,), 2)
    p = ModelParams(arch, [(np.ones((1, 1)), np.zeros(1)), (np.ones((1, 2)), np.zeros(2))])
    g = [(np.full((1, 1), 2.0), np.zeros(1)), (np.zeros((1, 2)), np.zeros(2))]
    assert nn_core.sgd_step(p, g, 0.1).layers[0][0][0, 0] == pytest.approx(0.8)
    assert nn_core.sgd_step(p, g, 0.0).digest() == p.digest()
    twice = nn_core.sgd_step(nn_core.sgd_step(p, g, 0.1), g, 0.1)
    once = nn_core.sgd_step(p, [(2 * a, 2 * b) for a, b in g], 0.1)
    assert np.allclose(twice.layers[0][0], once.layers[0][0], rtol=0, atol=1e-15)


def test_sgd_nonfinite():
    p = tiny_params()
    g = [(np.full(w.shape, np.nan), np.zeros(b.shape)) for w, b in p.layers]
    with pytest.raises(NumericError):
        nn_core.sgd_step(p, g, 0.1)


def test_params_json_roundtrip():
    p = nn_core.init_model(Architecture(5, (4, 3), 2), 9)
    q = ModelParams.from_json(p.to_json())
    assert q.digest() == p.digest()
    assert q.to_json() == p.to_json()
