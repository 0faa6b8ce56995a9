import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import Polynomial
from scipy.integrate import quad

from robustfl.approx import (ConditionalProjection, PolyTensor, composite_gl, lift_to_sphere,
                             lipschitz_dual_tabulate, moment_matrix, monomial_dual,
                             poly_dual_weights, relu_dual_weights, relu_multivariate_dual,
                             riemann_predict, riemann_second_layer, sphere_rule)
from robustfl.data import orthonormalize_rows
from robustfl.model import Activation, TwoLayerNet
from robustfl.rng import stream

R_B = 3.0
GRID = np.linspace(-R_B, R_B, 101)


# ---------------------------------------------------------------------------
# quadrature


def test_composite_gl_exact_on_kinked_integrand():
    x, w = composite_gl(-2.0, 3.0, 400, breaks=[0.7])
    assert np.sum(w * np.abs(x - 0.7)) == pytest.approx((2.7**2 + 2.3**2) / 2, rel=1e-14)
    assert composite_gl(1.0, 1.0)[0].size == 0


@pytest.mark.parametrize("k", [1, 2, 3])
def test_sphere_rule_moments(k):
    V, w = sphere_rule(k, 4000)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(np.linalg.norm(V, axis=1), 1.0, atol=1e-14)
    # E[v v^T] = I / k for the uniform measure
    np.testing.assert_allclose((V * w[:, None]).T @ V, np.eye(k) / k, atol=1e-13)


# ---------------------------------------------------------------------------
# univariate duals


@pytest.mark.parametrize("coef", [[1.0], [0, 1.0], [0, 0, 1.0], [0, 0, 0, 1.0]])
def test_relu_dual_reconstructs_monomials(coef):
    fn = relu_dual_weights(coef, R_B)
    err = np.max(np.abs(fn.reconstruct(GRID) - Polynomial(coef)(GRID)))
    assert err <= 1e-6


def test_relu_dual_against_adaptive_quadrature():
    fn = relu_dual_weights([0.3, -1.0, 0.5, 0.2], R_B)
    for z in (-2.5, -0.3, 0.0, 1.7):
        ref = sum(0.5 * quad(lambda b: fn(a, b) * max(a * z + b, 0.0), -R_B, R_B,
                             points=[-a * z], epsabs=1e-13)[0] for a in (-1.0, 1.0))
        assert fn.reconstruct([z])[0] == pytest.approx(ref, abs=1e-9)


def test_relu_dual_sup_bound():
    fn = relu_dual_weights([0, 0, 0, 1.0], R_B)
    b = np.linspace(-R_B, R_B, 2001)
    seen = max(np.max(np.abs(fn(a, b))) for a in (-1.0, 1.0))
    assert seen <= fn.sup_bound + 1e-12
    assert fn.sup_bound == pytest.approx(seen, rel=1e-3)
    with pytest.raises(ValueError):
        relu_dual_weights([1.0], 0.0)


@pytest.mark.parametrize("sigma", [[1.0, 1.0, 1.0], [0.5, -1.0, 0.0, 1.0], [0.0, 0.0, 2.0]])
@pytest.mark.parametrize("h", [[1.0], [0.2, -1.0], [0.0, 0.5, 1.0]])
def test_poly_dual_reconstructs_low_degree(sigma, h):
    q = len(sigma) - 1
    fn = poly_dual_weights(h, sigma, float(q))
    z = np.linspace(-5, 5, 101)
    assert np.max(np.abs(fn.reconstruct(z) - Polynomial(h)(z))) <= 1e-7


def test_poly_dual_against_adaptive_quadrature():
    sigma = Polynomial([0.5, -1.0, 0.0, 1.0])
    fn = poly_dual_weights([0.0, 0.5, 1.0], sigma, 3.0)
    for z in (-1.0, 0.4, 2.0):
        ref = quad(lambda b: fn(np.array(b)) * sigma(z + b), -3, 3, points=list(fn.breaks),
                   epsabs=1e-13)[0]
        assert fn.reconstruct([z])[0] == pytest.approx(ref, abs=1e-9)


def test_poly_dual_rejects_bad_inputs():
    with pytest.raises(ValueError):
        poly_dual_weights([0, 0, 1.0], [0, 1.0], 3.0)
    with pytest.raises(ValueError):
        poly_dual_weights([0, 1.0], [0, 0, 1.0], 1.0)


# ---------------------------------------------------------------------------
# sphere duals


def test_circle_moment_matrix():
    # vec(v v^T) = (c^2, cs, sc, s^2); E c^4 = E s^4 = 3/8 and E c^2 s^2 = 1/8
    c4 = quad(lambda t: math.cos(t) ** 4, 0, 2 * math.pi)[0] / (2 * math.pi)
    c2s2 = quad(lambda t: (math.cos(t) * math.sin(t)) ** 2, 0, 2 * math.pi)[0] / (2 * math.pi)
    assert c4 == pytest.approx(3 / 8, abs=1e-12) and c2s2 == pytest.approx(1 / 8, abs=1e-12)
    want = np.array([[c4, 0, 0, c2s2], [0, c2s2, c2s2, 0], [0, c2s2, c2s2, 0], [c2s2, 0, 0, c4]])
    np.testing.assert_allclose(moment_matrix(2, 2), want, atol=1e-10)


def test_monomial_dual_identity_tensor():
    T = np.eye(2) / math.sqrt(2)
    fn = monomial_dual(T)
    Z = np.random.default_rng(0).standard_normal((20, 2))
    np.testing.assert_allclose(fn.reconstruct(Z), np.sum(Z**2, axis=1) / math.sqrt(2), atol=1e-6)


@pytest.mark.parametrize("k,s", [(2, 1), (2, 3), (3, 2), (2, 4)])
def test_monomial_dual_random_symmetric(k, s):
    rng = np.random.default_rng(10 * k + s)
    T = rng.standard_normal((k,) * s)
    T = sum(np.transpose(T, p) for p in itertools.permutations(range(s)))
    fn = monomial_dual(T)
    Z = rng.standard_normal((10, k))
    want = PolyTensor([np.zeros((k,) * j) for j in range(s)] + [T])(Z)
    np.testing.assert_allclose(fn.reconstruct(Z), want, atol=1e-8 * np.max(np.abs(want)))


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_monomial_dual_is_linear_in_tensor(c1, c2, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((2, 2, 2))
    A, B = A + A.T, B + B.T
    V = rng.standard_normal((5, 2))
    lhs = monomial_dual(c1 * A + c2 * B, n_quad=256)(V)
    rhs = c1 * monomial_dual(A, n_quad=256)(V) + c2 * monomial_dual(B, n_quad=256)(V)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.max(np.abs(rhs))))


def test_monomial_dual_rejects_unsymmetric():
    with pytest.raises(ValueError):
        monomial_dual(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_relu_multivariate_dual_quadratic():
    h = PolyTensor([np.array(0.5), np.array([1.0, -0.5]), np.array([[1.0, 0.3], [0.3, 0.5]])])
    fn = relu_multivariate_dual(h, R_B)
    Z = np.random.default_rng(1).uniform(-1, 1, (4, 2))
    np.testing.assert_allclose(fn.reconstruct(Z, n_sphere=64, n_bias=400), h(Z), atol=1e-9)


def test_lift_to_sphere():
    V = np.array([[0.6, 0.8], [1.0, 0.0], [0.0, -1.0]])
    bt = np.array([0.0, 2.0, -0.5])
    P = lift_to_sphere(V, bt)
    np.testing.assert_allclose(np.linalg.norm(P, axis=1), 1.0, atol=1e-15)
    np.testing.assert_allclose(P[:, -1] / np.linalg.norm(P[:, :-1], axis=1), bt, atol=1e-14)
    np.testing.assert_allclose(P[:, :-1] / np.linalg.norm(P[:, :-1], axis=1)[:, None], V)


def test_lipschitz_wrapper_density_shape():
    fn = lipschitz_dual_tabulate(lambda P: np.ones(len(P)), 1, r_z=2.0, r_b=4.0, n_grid=64)
    b = np.array([0.0, 2.0])
    vals = fn.hhat(np.array([[1.0], [1.0]]), b)
    # constant inner density: Z_1 r_z / (r_z^2 + b^2)^(3/2)
    np.testing.assert_allclose(vals, 2.0 / math.pi / (4.0 + b**2) ** 1.5)
    # tabulated on an even grid, which misses b = 0
    assert fn.sup_bound == pytest.approx(vals[0], rel=1e-2)
    with pytest.raises(ValueError):
        lipschitz_dual_tabulate(lambda P: P[:, 0], 3, 1.0, 1.0)


# ---------------------------------------------------------------------------
# finite width


def aligned_layer(N, r_b, seed=0, d=10):
    U = np.eye(1, d)
    W = np.zeros((N, d))
    W[: N // 2, 0], W[N // 2:, 0] = 1.0, -1.0
    return U, W, stream(seed, "riemann-bias").uniform(-r_b, r_b, N)


def test_riemann_linear_target():
    N, zeta = 2000, 1e-4
    U, W, b = aligned_layer(N, R_B)
    fn = relu_dual_weights([0, 1.0], R_B)
    res = riemann_second_layer(fn, W, b, U, zeta, R_B)
    z = np.linspace(-1, 1, 201)
    assert np.max(np.abs(riemann_predict(res, b, z[:, None]) - z)) <= 0.05
    alpha = min(len(S) for S in res.groups) / N
    # fixture constant 2 r_b sup|hhat|: the widest bias gap is O(r_b log N / (alpha N))
    assert np.max(np.abs(res.a)) <= 2 * R_B * fn.sup_bound * math.log(N) / (alpha * N)


def test_riemann_error_shrinks_with_width():
    fn = relu_dual_weights([0, 0, 1.0], R_B)
    z = np.linspace(-1, 1, 101)
    errs = []
    for N in (250, 1000, 4000):
        U, W, b = aligned_layer(N, R_B, seed=1)
        res = riemann_second_layer(fn, W, b, U, 1e-4, R_B)
        errs.append(np.max(np.abs(riemann_predict(res, b, z[:, None]) - z**2)))
    assert errs[0] > errs[1] > errs[2]


def test_riemann_k2_quadratic():
    rng = np.random.default_rng(3)
    N, r_b, d = 6000, 2.0, 5
    U = orthonormalize_rows(rng.standard_normal((2, d)))
    th = rng.uniform(0, 2 * math.pi, N)
    W = np.column_stack([np.cos(th), np.sin(th)]) @ U
    b = rng.uniform(-r_b, r_b, N)
    h = PolyTensor([np.array(0.0), np.zeros(2), np.eye(2)])
    res = riemann_second_layer(relu_multivariate_dual(h, r_b, n_quad=512), W, b, U, 0.02, r_b)
    Z = rng.uniform(-0.7, 0.7, (30, 2))
    assert np.max(np.abs(riemann_predict(res, b, Z) - h(Z))) <= 0.1


def test_riemann_empty_cell_reported():
    U, W, b = aligned_layer(40, R_B)
    b[:] = 0.0
    with pytest.raises(ValueError, match="contains no bias"):
        riemann_second_layer(relu_dual_weights([0, 1.0], R_B), W, b, U, 1e-4, R_B)


# ---------------------------------------------------------------------------
# conditional projection


def test_projection_of_in_span_linear_is_exact():
    rng = np.random.default_rng(0)
    U = orthonormalize_rows(rng.standard_normal((2, 8)))
    w = rng.standard_normal(2) @ U
    h = ConditionalProjection(lambda X: X @ w, U, m=16)
    Z = rng.standard_normal((5, 2))
    np.testing.assert_allclose(h(Z), Z @ (U @ w), atol=1e-12)


def test_projection_of_squared_norm():
    d, k = 12, 2
    U = orthonormalize_rows(np.random.default_rng(1).standard_normal((k, d)))
    h = ConditionalProjection(lambda X: np.sum(X**2, axis=1), U, m=4000)
    Z = np.random.default_rng(2).standard_normal((6, k))
    want = np.sum(Z**2, axis=1) + (d - k)
    assert np.all(np.abs(h(Z) - want) <= 4 * h.std_err(Z))


def test_projection_std_err_scales_with_draws():
    U = np.eye(1, 6)
    f = lambda X: np.sum(X**2, axis=1)
    z = np.zeros((1, 1))
    ratio = ConditionalProjection(f, U, m=16_000, seed=1).std_err(z)[0] / \
        ConditionalProjection(f, U, m=4000, seed=1).std_err(z)[0]
    assert 0.45 <= ratio <= 0.55


def test_projection_net_fast_path_matches_generic():
    rng = np.random.default_rng(3)
    net = TwoLayerNet(rng.standard_normal(7), rng.standard_normal((7, 9)) / 3,
                      rng.standard_normal(7), Activation("tanh"))
    U = orthonormalize_rows(rng.standard_normal((2, 9)))
    fast = ConditionalProjection(net, U, m=50, seed=4)
    slow = ConditionalProjection(lambda X: net.forward(X), U, m=50, seed=4)
    X = rng.standard_normal((6, 9))
    np.testing.assert_allclose(fast.forward(X), slow.forward(X), atol=1e-12)
    num = np.array([(fast.forward(x + 1e-6 * e) - fast.forward(x - 1e-6 * e)) / 2e-6
                    for x in X[:2] for e in np.eye(9)]).reshape(2, 9)
    np.testing.assert_allclose(fast.grad_input(X[:2]), num, atol=1e-7)
