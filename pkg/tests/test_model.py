import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import central_diff, fd_param_grads, rel_err, smooth_net
from robustfl.data import orthonormalize_rows
from robustfl.model import (Activation, LinearPredictor, TwoLayerNet, linear_neuron,
                            project_to_subspace, projection_error_bound, random_net)


def relu_net(a, W, b):
    return TwoLayerNet(np.asarray(a, float), np.asarray(W, float), np.asarray(b, float),
                       Activation("relu"))


def test_forward_small_cases():
    d = 4
    e1 = np.eye(d)[0]
    assert relu_net(np.zeros(3), np.ones((3, d)), np.zeros(3))(np.ones(d)) == 0.0
    assert relu_net([1.0], [e1], [0.0])(-e1) == 0.0
    assert relu_net([1.0, 1.0], [e1, -e1], [0.0, 0.0])(3 * e1) == 3.0


def test_zero_a_gives_zero_hidden_grads():
    rng = np.random.default_rng(0)
    net = TwoLayerNet(np.zeros(5), rng.standard_normal((5, 3)), rng.standard_normal(5),
                      Activation("tanh"))
    X, y = rng.standard_normal((7, 3)), rng.standard_normal(7)
    ga, gW, gb, _ = net.grad_params(X, y)
    assert np.all(gW == 0) and np.all(gb == 0)
    assert np.all(net.grad_input(X) == 0)


def test_linear_neuron_hand_formula():
    rng = np.random.default_rng(1)
    w, x, y = rng.standard_normal(5), rng.standard_normal(5), 0.7
    net = linear_neuron(w)
    ga, gW, gb, loss = net.grad_params(x[None, :], np.array([y]))
    s = w @ x
    assert ga[0] == pytest.approx(2 * (s - y) * s, abs=1e-12)
    np.testing.assert_allclose(gW[0], 2 * (s - y) * x, atol=1e-12)
    assert loss == pytest.approx((s - y) ** 2, abs=1e-12)
    np.testing.assert_allclose(net.grad_input(x), w, atol=0)


@pytest.mark.parametrize("kind", ["tanh", "poly"])
@pytest.mark.parametrize("seed", range(5))
def test_param_grads_match_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    d, N = rng.integers(2, 9), rng.integers(1, 9)
    net = smooth_net(rng, d, N, kind)
    X, y = rng.standard_normal((6, d)), rng.standard_normal(6)
    ga, gW, gb, _ = net.grad_params(X, y)
    fa, fW, fb = fd_param_grads(net, X, y)
    assert max(rel_err(ga, fa), rel_err(gW, fW), rel_err(gb, fb)) <= 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_input_grad_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    d, N = rng.integers(2, 9), rng.integers(1, 9)
    net = smooth_net(rng, d, N)
    x = rng.standard_normal(d)
    assert rel_err(net.grad_input(x), central_diff(net.forward, x)) <= 1e-5


def test_relu_grads_away_from_kinks():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 5:
        net = random_net(6, 5, "relu", rng)
        X = rng.standard_normal((4, 6))
        if np.min(np.abs(net.preact(X))) < 1e-3:
            continue
        y = rng.standard_normal(4)
        ga, gW, gb, _ = net.grad_params(X, y)
        fa, fW, fb = fd_param_grads(net, X, y)
        assert max(rel_err(ga, fa), rel_err(gW, fW), rel_err(gb, fb)) <= 1e-5
        checked += 1


def test_hermite_mix_derivative():
    rng = np.random.default_rng(3)
    act = Activation("hermite_mix", beta=rng.standard_normal((4, 3)))
    z = rng.standard_normal((5, 4))
    num = (act.value(z + 1e-6) - act.value(z - 1e-6)) / 2e-6
    np.testing.assert_allclose(act.deriv(z), num, rtol=1e-6, atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_forward_homogeneous_in_a(seed):
    rng = np.random.default_rng(seed)
    net = random_net(4, 3, "tanh", rng)
    X = rng.standard_normal((5, 4))
    scaled = net.copy(a=2 * net.a)
    assert np.array_equal(scaled.forward(X), 2 * net.forward(X))


def test_validation():
    with pytest.raises(ValueError):
        relu_net(np.ones(2), np.ones((3, 4)), np.zeros(3))
    with pytest.raises(ValueError):
        relu_net(np.ones(1), np.full((1, 2), np.nan), np.zeros(1))
    with pytest.raises(ValueError):
        TwoLayerNet(np.ones(1), np.ones((1, 2)), np.zeros(1), Activation("relu"), unit_rows=True)
    net = relu_net(np.ones(1), np.ones((1, 2)), np.zeros(1))
    with pytest.raises(ValueError):
        net.forward(np.ones(3))
    with pytest.raises(ValueError):
        Activation("polynomial").lipschitz()


def test_checkpoint_round_trip(tmp_path):
    net = random_net(5, 4, "tanh", np.random.default_rng(0)).copy(meta={"seed": 3, "phase": 2})
    net.save(tmp_path / "n.json")
    back = TwoLayerNet.load(tmp_path / "n.json")
    X = np.random.default_rng(1).standard_normal((3, 5))
    assert np.array_equal(back.forward(X), net.forward(X))
    assert back.meta == {"seed": 3, "phase": 2}


def test_linear_predictor_matches_linear_neuron():
    w = np.array([0.3, -1.0, 2.0])
    X = np.random.default_rng(2).standard_normal((4, 3))
    np.testing.assert_allclose(LinearPredictor(w)(X), linear_neuron(w)(X), atol=1e-15)
    np.testing.assert_array_equal(LinearPredictor(w).grad_input(X[0]), w)


def test_projection_exact_in_span():
    rng = np.random.default_rng(4)
    U_hat = orthonormalize_rows(rng.standard_normal((2, 7)))
    net = TwoLayerNet(rng.standard_normal(5), rng.standard_normal((5, 2)) @ U_hat,
                      rng.standard_normal(5), Activation("tanh"))
    red = project_to_subspace(net, U_hat)
    X = rng.standard_normal((10, 7))
    np.testing.assert_allclose(net(X), red(X @ U_hat.T), atol=1e-12)


def test_projection_exact_for_inputs_in_span():
    rng = np.random.default_rng(5)
    U_hat = orthonormalize_rows(rng.standard_normal((2, 7)))
    net = random_net(7, 5, "relu", rng)
    red = project_to_subspace(net, U_hat)
    X = rng.standard_normal((10, 2)) @ U_hat
    np.testing.assert_allclose(net(X), red(X @ U_hat.T), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_projection_error_bound(seed):
    rng = np.random.default_rng(seed)
    U_hat = orthonormalize_rows(rng.standard_normal((2, 6)))
    net = random_net(6, 8, "relu", rng)
    red = project_to_subspace(net, U_hat)
    for x in rng.standard_normal((20, 6)):
        assert abs(net(x) - red(U_hat @ x)) <= projection_error_bound(net, U_hat, x) + 1e-12
