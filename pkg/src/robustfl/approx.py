"""Infinite-width second layers and their finite-width discretization.

A *dual weight function* ``hhat`` represents a target ``h`` as an integral over
neurons,

    h(z) = integral of hhat(v, b) sigma(<v, z> + b)  dtau(v) db,

and :func:`riemann_second_layer` turns such an integral into finite second-layer
weights for a given set of neurons. All integrals are evaluated with composite
Gauss-Legendre rules split at kinks, so identities hold to rounding level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial.legendre import leggauss
from scipy.special import comb

from robustfl.data import _check_symmetric, contract_sym
from robustfl.model import TwoLayerNet, check_orthonormal_rows
from robustfl.oracles import PackingSet, build_packing
from robustfl.rng import stream


# ---------------------------------------------------------------------------
# quadrature


def composite_gl(lo: float, hi: float, n: int = 10_000, breaks=(), order: int = 20):
    """Nodes and weights of a composite Gauss-Legendre rule on ``[lo, hi]``.

    Panels of ``order`` nodes each; every point of ``breaks`` inside the
    interval is a panel boundary so piecewise-smooth integrands stay exact.
    """
    if hi <= lo:
        return np.zeros(0), np.zeros(0)
    cuts = sorted({lo, hi, *(float(c) for c in np.ravel(breaks) if lo < c < hi)})
    panels_total = max(1, n // order)
    x0, w0 = leggauss(order)
    xs, ws = [], []
    span = hi - lo
    for a, b in zip(cuts[:-1], cuts[1:]):
        m = max(1, int(round(panels_total * (b - a) / span)))
        edges = np.linspace(a, b, m + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[:-1] + edges[1:])
        xs.append((mid[:, None] + half[:, None] * x0).ravel())
        ws.append((half[:, None] * w0).ravel())
    return np.concatenate(xs), np.concatenate(ws)


def sphere_rule(k: int, n: int = 10_000):
    """Nodes (rows on S^{k-1}) and weights summing to 1 for the uniform measure.

    k = 1: the two points +-1. k = 2: ``n`` equispaced angles, exact for
    trigonometric polynomials of degree below ``n``. k = 3: Gauss-Legendre in
    ``cos(theta)`` times equispaced ``phi``.
    """
    if k == 1:
        return np.array([[1.0], [-1.0]]), np.array([0.5, 0.5])
    if k == 2:
        th = 2 * math.pi * np.arange(n) / n
        return np.column_stack([np.cos(th), np.sin(th)]), np.full(n, 1.0 / n)
    if k == 3:
        m = max(8, int(round(math.sqrt(n / 2))))
        c, wc = leggauss(m)
        phi = 2 * math.pi * np.arange(2 * m) / (2 * m)
        C, P = np.meshgrid(c, phi, indexing="ij")
        s = np.sqrt(1 - C**2)
        V = np.column_stack([(s * np.cos(P)).ravel(), (s * np.sin(P)).ravel(), C.ravel()])
        W = (np.repeat(wc, 2 * m) / 2) / (2 * m)
        return V, W
    raise ValueError("sphere quadrature supports k <= 3")


def _sphere_sup(fn: Callable[[np.ndarray], np.ndarray], k: int) -> float:
    """sup |fn| over S^{k-1}: grid search refined by a local maximization."""
    if k == 1:
        return float(np.max(np.abs(fn(np.array([[1.0], [-1.0]])))))
    from scipy.optimize import minimize, minimize_scalar
    if k == 2:
        th = np.linspace(0, 2 * math.pi, 4096, endpoint=False)
        vals = np.abs(fn(np.column_stack([np.cos(th), np.sin(th)])))
        t0 = th[np.argmax(vals)]
        h = 2 * math.pi / 4096
        res = minimize_scalar(lambda t: -abs(fn(np.array([[math.cos(t), math.sin(t)]]))[0]),
                              bounds=(t0 - h, t0 + h), method="bounded",
                              options={"xatol": 1e-13})
        return float(max(vals.max(), -res.fun))
    V, _ = sphere_rule(k, 20_000)
    vals = np.abs(fn(V))
    v0 = V[np.argmax(vals)]

    def neg(p):
        v = p / np.linalg.norm(p)
        return -abs(fn(v[None, :])[0])

    res = minimize(neg, v0, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15})
    return float(max(vals.max(), -res.fun))


# ---------------------------------------------------------------------------
# types


@dataclass
class PolyTensor:
    """``h(z) = sum_s T^(s)[z^{(x) s}]`` over R^k."""

    tensors: list[np.ndarray]

    def __post_init__(self):
        self.tensors = [np.asarray(t, dtype=np.float64) for t in self.tensors]
        k = next((t.shape[0] for t in self.tensors if t.ndim), 1)
        for s, t in enumerate(self.tensors):
            if t.shape != (k,) * s:
                raise ValueError(f"T^({s}) has shape {t.shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"T^({s}) has non-finite entries")
            _check_symmetric(t)
        self.k = k

    @property
    def degree(self) -> int:
        return len(self.tensors) - 1

    def __call__(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return sum(contract_sym(t, z) for t in self.tensors)


@dataclass
class DualWeightFn:
    kind: str
    sup_bound: float = float("nan")
    params: dict = field(default_factory=dict)

    def hhat(self, v: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Density against ``dtau_k(v) db`` for the ReLU integral representation."""
        raise NotImplementedError(f"{self.kind} has no (v, b) density")


def _poly(c) -> Polynomial:
    return c if isinstance(c, Polynomial) else Polynomial(np.asarray(c, dtype=np.float64))


def _poly_sup(p: Polynomial, lo: float, hi: float) -> float:
    pts = [lo, hi]
    if p.degree() >= 1:
        pts += [r.real for r in p.deriv().roots() if abs(r.imag) < 1e-12 and lo <= r.real <= hi]
    return float(np.max(np.abs(p(np.array(pts)))))


# ---------------------------------------------------------------------------
# ReLU, univariate


@dataclass
class ReluDual(DualWeightFn):
    """``f(a, b)`` with ``E_{a, b}[2 r_b f(a, b) relu(a z + b)] = h(z)`` for ``|z| <= r_b``.

    ``a`` is uniform on {-1, +1} and ``b`` uniform on ``[-r_b, r_b]``.
    """

    h: Polynomial = None
    r_b: float = 1.0
    _h2: Polynomial = None
    _lin: float = 0.0
    _slope: float = 0.0

    def __call__(self, a, b):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        return (1 - a) * self._h2(b) + a * self._lin - self._slope * b

    def reconstruct(self, z, n_nodes: int = 10_000) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=np.float64))
        out = np.empty_like(z)
        r = self.r_b
        for i, zi in enumerate(z):
            tot = 0.0
            for a in (-1.0, 1.0):
                # relu(a z + b) vanishes for b < -a z
                b, w = composite_gl(max(-r, -a * zi), r, n_nodes // 2)
                tot += 0.5 * np.sum(w * self(a, b) * (a * zi + b))
            out[i] = tot
        return out

    def hhat(self, v, b):
        # tau_1 is uniform on {+-1}, so the density in (v, b) is f itself
        return self(np.asarray(v)[..., 0], b)


def relu_dual_weights(h, r_b: float) -> ReluDual:
    """``f(a, b) = (1 - a) h''(b) + a h'(r_b) / r_b - 3 b (h'(r_b) r_b - h(r_b)) / r_b^3``."""
    if r_b <= 0:
        raise ValueError("r_b must be > 0")
    h = _poly(h)
    d1 = h.deriv()
    h2 = h.deriv(2)
    lin = float(d1(r_b)) / r_b
    slope = 3.0 * (float(d1(r_b)) * r_b - float(h(r_b))) / r_b**3
    fn = ReluDual(kind="relu_univariate", h=h, r_b=r_b, _h2=h2, _lin=lin, _slope=slope,
                  params={"h": h.coef.tolist(), "r_b": r_b})
    sup = 0.0
    for a in (-1.0, 1.0):
        p = (1 - a) * h2 + Polynomial([a * lin, -slope])
        sup = max(sup, _poly_sup(p, -r_b, r_b))
    fn.sup_bound = sup
    return fn


# ---------------------------------------------------------------------------
# polynomial activation, univariate


@dataclass
class PolyDual(DualWeightFn):
    """Piecewise-constant ``f(b)`` with ``E_b[2 r_b f(b) sigma(z + b)] = h(z)`` for every z."""

    sigma: Polynomial = None
    r_b: float = 1.0
    beta: np.ndarray = None
    breaks: np.ndarray = None
    values: np.ndarray = None

    def __call__(self, b):
        b = np.asarray(b, dtype=np.float64)
        idx = np.searchsorted(self.breaks, b, side="right") - 1
        inside = (idx >= 0) & (idx < len(self.values))
        out = np.zeros_like(b)
        out[inside] = self.values[idx[inside]]
        return out

    def reconstruct(self, z, n_nodes: int = 10_000) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=np.float64))
        b, w = composite_gl(-self.r_b, self.r_b, n_nodes, breaks=self.breaks)
        fb = self(b) * w
        return np.array([np.sum(fb * self.sigma(zi + b)) for zi in z])


def finite_difference_family(sigma: Polynomial, q: int) -> list[Polynomial]:
    """``[g_0, ..., g_q]`` with ``g_q(z) = int_{-q}^0 sigma(z + b) db`` and
    ``g_{j-1}(z) = g_j(z + 1) - g_j(z)``; ``g_j`` has degree ``j``."""
    G = sigma.integ()
    gq = G - G(Polynomial([-q, 1]))
    g = {q: gq}
    for j in range(q, 0, -1):
        g[j - 1] = g[j](Polynomial([1, 1])) - g[j]
    return [g[j].trim(tol=0) for j in range(q + 1)]


def poly_dual_weights(h, sigma, r_b: float) -> PolyDual:
    """Solve ``h = sum_j beta_j g_j`` by back-substitution and assemble the indicator form.

    ``f(b) = sum_i beta_{q-i} sum_{j<=i} (-1)^{i-j} C(i, j) 1[-q + j <= b <= j]``,
    supported on ``[-q, q]`` (needs ``r_b >= q``).
    """
    h = _poly(h)
    sigma = _poly(sigma)
    p, q = h.degree(), sigma.degree()
    if q < p:
        raise ValueError(f"activation degree {q} is below target degree {p}")
    if r_b < q:
        raise ValueError(f"need r_b >= q = {q}, got {r_b}")
    g = finite_difference_family(sigma, q)
    coef = np.zeros(q + 1)
    coef[: p + 1] = h.coef[: p + 1]
    beta = np.zeros(q + 1)
    resid = coef.copy()
    for j in range(q, -1, -1):
        gj = np.zeros(q + 1)
        gj[: len(g[j].coef)] = g[j].coef
        gamma = gj[j]
        if abs(gamma) < 1e-300:
            raise ValueError(f"degenerate activation: leading coefficient of g_{j} is zero")
        beta[j] = resid[j] / gamma
        resid -= beta[j] * gj
    # f on the unit cells [m, m+1), m = -q..q-1
    breaks = np.arange(-q, q + 1, dtype=np.float64)
    values = np.zeros(2 * q)
    for i in range(q + 1):
        for j in range(i + 1):
            c = (-1) ** (i - j) * comb(i, j, exact=True)
            # 1[-q + j <= b <= j] covers cells m = -q + j .. j - 1
            values[j: j + q] += beta[q - i] * c
    # E_b[2 r_b f sigma] = integral of f sigma over b
    fn = PolyDual(kind="poly_univariate", sigma=sigma, r_b=r_b, beta=beta, breaks=breaks,
                  values=values, params={"h": h.coef.tolist(), "sigma": sigma.coef.tolist(),
                                         "r_b": r_b, "beta": beta.tolist()})
    fn.sup_bound = float(np.max(np.abs(values))) if len(values) else 0.0
    return fn


# ---------------------------------------------------------------------------
# monomial tensors on the sphere


def _sym_basis(k: int, s: int) -> np.ndarray:
    """Orthonormal basis (columns) of symmetric order-s tensors, vectorized."""
    from itertools import combinations_with_replacement, permutations
    cols = []
    for idx in combinations_with_replacement(range(k), s):
        t = np.zeros((k,) * s)
        for perm in set(permutations(idx)):
            t[perm] = 1.0
        cols.append(t.ravel() / np.linalg.norm(t))
    return np.column_stack(cols) if cols else np.ones((1, 1))


def tensor_power_vec(V: np.ndarray, s: int) -> np.ndarray:
    """Rows ``vec(v^{(x) s})`` for each row ``v`` of ``V``."""
    out = np.ones((V.shape[0], 1))
    for _ in range(s):
        out = (out[:, :, None] * V[:, None, :]).reshape(V.shape[0], -1)
    return out


@dataclass
class MonomialDual(DualWeightFn):
    """``f(v) = vec(v^{(x) s})^T M^+ vec(T)`` with ``M = E_tau[vec vec^T]``.

    ``M`` is singular on the full ``k^s`` space (it only sees symmetric tensors),
    so the pseudo-inverse is taken on the symmetric subspace, where ``M`` is
    invertible.
    """

    k: int = 1
    s: int = 0
    M: np.ndarray = None
    coef: np.ndarray = None
    n_quad: int = 10_000

    def __call__(self, V) -> np.ndarray:
        V = np.atleast_2d(np.asarray(V, dtype=np.float64))
        return tensor_power_vec(V, self.s) @ self.coef

    def reconstruct(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        V, w = sphere_rule(self.k, self.n_quad)
        fv = self(V) * w
        return fv @ (V @ Z.T) ** self.s


def moment_matrix(k: int, s: int, n_quad: int = 10_000) -> np.ndarray:
    V, w = sphere_rule(k, n_quad)
    P = tensor_power_vec(V, s)
    return (P * w[:, None]).T @ P


def monomial_dual(T, k: int | None = None, n_quad: int = 10_000,
                  max_cond: float = 1e10) -> MonomialDual:
    T = np.asarray(T, dtype=np.float64)
    s = T.ndim
    if k is None:
        k = T.shape[0] if s else 1
    if T.shape != (k,) * s:
        raise ValueError(f"tensor shape {T.shape} does not match k={k}, s={s}")
    if k > 3 or s > 4:
        raise ValueError("monomial duals are supported for k <= 3 and s <= 4")
    _check_symmetric(T)
    M = moment_matrix(k, s, n_quad)
    B = _sym_basis(k, s)
    Ms = B.T @ M @ B
    ev = np.linalg.eigvalsh(Ms)
    cond = ev[-1] / ev[0] if ev[0] > 0 else math.inf
    if cond > max_cond:
        raise ValueError(f"moment matrix is ill-conditioned on symmetric tensors (cond {cond:.3e})")
    coef = B @ np.linalg.solve(Ms, B.T @ T.ravel())
    fn = MonomialDual(kind="monomial", k=k, s=s, M=M, coef=coef, n_quad=n_quad,
                      params={"k": k, "s": s, "cond": cond})
    fn.sup_bound = _sphere_sup(fn, k)
    return fn


# ---------------------------------------------------------------------------
# ReLU, multivariate


@dataclass
class ReluMultiDual(DualWeightFn):
    """Density ``hhat(v, b)`` on ``S^{k-1} x [-r_b, r_b]`` for a polynomial target.

    Each homogeneous part ``T^(s)`` becomes a sphere density ``f_s`` with
    ``int f_s(v) <v, z>^s dtau = T^(s)[z^s]``, and each ridge ``t^s`` a ReLU dual
    ``g_s(a, b)``. Folding ``a = -1`` into ``v -> -v`` gives
    ``hhat(v, b) = sum_s (f_s(v) g_s(1, b) + f_s(-v) g_s(-1, b)) / 2``, valid
    for ``||z|| <= r_b`` against ``dtau_k(v) db``.
    """

    k: int = 1
    r_b: float = 1.0
    parts: list = field(default_factory=list)

    def hhat(self, V, b):
        V = np.atleast_2d(np.asarray(V, dtype=np.float64))
        b = np.asarray(b, dtype=np.float64)
        out = np.zeros(np.broadcast(V[:, 0], b).shape)
        for f_s, g_s in self.parts:
            out = out + 0.5 * (f_s(V) * g_s(1.0, b) + f_s(-V) * g_s(-1.0, b))
        return out

    def reconstruct(self, Z, n_sphere: int = 2000, n_bias: int = 2000) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        V, wv = sphere_rule(self.k, n_sphere)
        out = np.empty(Z.shape[0])
        for i, z in enumerate(Z):
            t = V @ z
            tot = 0.0
            for vq, tq, wq in zip(V, t, wv):
                b, wb = composite_gl(max(-self.r_b, -tq), self.r_b, n_bias)
                tot += wq * np.sum(wb * self.hhat(vq[None, :], b) * (tq + b))
            out[i] = tot
        return out


def relu_multivariate_dual(h: PolyTensor, r_b: float, n_quad: int = 10_000) -> ReluMultiDual:
    parts = []
    for s, T in enumerate(h.tensors):
        if not np.any(T):
            continue
        parts.append((monomial_dual(T, h.k, n_quad), relu_dual_weights(Polynomial([0] * s + [1]), r_b)))
    fn = ReluMultiDual(kind="relu_multivariate", k=h.k, r_b=r_b, parts=parts,
                       params={"k": h.k, "r_b": r_b, "degree": h.degree})
    fn.sup_bound = sum(f.sup_bound * g.sup_bound for f, g in parts)
    return fn


# ---------------------------------------------------------------------------
# Lipschitz targets: change-of-variables wrapper only

SPHERE_DENSITY_CONSTANT = {1: 1.0 / math.pi, 2: 0.5}


def lift_to_sphere(V: np.ndarray, b_tilde) -> np.ndarray:
    """``T(v, bt) = (v, bt) / sqrt(1 + bt^2)``, a point of S^k."""
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    bt = np.broadcast_to(np.asarray(b_tilde, dtype=np.float64), V.shape[:1])
    return np.column_stack([V, bt]) / np.sqrt(1.0 + bt**2)[:, None]


@dataclass
class LipschitzDual(DualWeightFn):
    """``hhat(v, b) = Z_k r_z^k p(T(v, b / r_z)) / (r_z^2 + b^2)^{(k+2)/2}``.

    Experimental: the inner density ``p`` on S^k is supplied by the caller. No
    construction of ``p`` from ``h`` is attempted here.
    """

    k: int = 1
    r_z: float = 1.0
    r_b: float = 1.0
    p: Callable = None

    def hhat(self, V, b):
        b = np.asarray(b, dtype=np.float64)
        Zk = SPHERE_DENSITY_CONSTANT[self.k]
        lifted = lift_to_sphere(V, b / self.r_z)
        return Zk * self.r_z**self.k * self.p(lifted) / (self.r_z**2 + b**2) ** ((self.k + 2) / 2)


def lipschitz_dual_tabulate(p: Callable, k: int, r_z: float, r_b: float,
                            Delta: float = 1.0, n_grid: int = 512) -> LipschitzDual:
    if k not in SPHERE_DENSITY_CONSTANT:
        raise ValueError("the Lipschitz wrapper supports k in {1, 2}")
    if Delta <= 0 or r_z <= 0 or r_b <= 0:
        raise ValueError("Delta, r_z and r_b must be > 0")
    fn = LipschitzDual(kind="lipschitz_sphere", k=k, r_z=r_z, r_b=r_b, p=p,
                       params={"k": k, "r_z": r_z, "r_b": r_b, "Delta": Delta,
                               "experimental": True})
    V, _ = sphere_rule(k, n_grid)
    bs = np.linspace(-r_b, r_b, n_grid)
    vals = [np.max(np.abs(fn.hhat(V, bb))) for bb in bs]
    fn.sup_bound = float(np.max(vals))
    return fn


# ---------------------------------------------------------------------------
# finite width


@dataclass
class RiemannResult:
    a: np.ndarray
    A: int
    packing: PackingSet
    groups: list
    directions: np.ndarray


def _bias_cells(bias: np.ndarray, idx: np.ndarray, r_b: float):
    """Nearest-bias cells inside ``[-r_b, r_b]``; equal biases go to the lowest index."""
    order = np.lexsort((idx, bias))
    bs, js = bias[order], idx[order]
    keep = np.ones(len(bs), dtype=bool)
    keep[1:] = bs[1:] != bs[:-1]
    bs, js = bs[keep], js[keep]
    mids = 0.5 * (bs[1:] + bs[:-1])
    lo = np.concatenate([[-r_b], np.clip(mids, -r_b, r_b)])
    hi = np.concatenate([np.clip(mids, -r_b, r_b), [r_b]])
    return js, lo, hi


def _arc_cells(P: np.ndarray):
    """Voronoi arcs of points on the circle as (start, end) angles with start < end."""
    th = np.arctan2(P[:, 1], P[:, 0])
    order = np.argsort(th)
    ts = th[order]
    nxt = np.roll(ts, -1)
    nxt[-1] += 2 * math.pi
    prv = np.roll(ts, 1)
    prv[0] -= 2 * math.pi
    start = np.empty(len(P))
    end = np.empty(len(P))
    start[order] = 0.5 * (ts + prv)
    end[order] = 0.5 * (ts + nxt)
    return start, end


def riemann_second_layer(hhat: DualWeightFn, W: np.ndarray, b: np.ndarray, U: np.ndarray,
                         zeta: float, r_b: float, delta: float = 0.01, seed: int = 0,
                         nodes: int = 8, check_good_event: bool = True) -> RiemannResult:
    """Finite second layer ``a*`` from a dual density.

    Neuron directions ``v_j = U w_j / ||U w_j||`` are grouped around a
    ``2 sqrt(2 zeta)``-packing ``{p_i}``: ``S_i = {j : ||v_j - p_i|| <= sqrt(2 zeta)}``.
    Every ``(v, b)`` is assigned to its nearest packing point ``i`` and then to
    the nearest bias among ``S_i``, and ``a*_j`` is the integral of ``hhat`` over
    the cell assigned to neuron ``j``. Neurons outside every group get 0.
    """
    U = check_orthonormal_rows(U)
    k = U.shape[0]
    if k not in (1, 2):
        raise ValueError("the finite-width construction supports k in {1, 2}")
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64)
    N = W.shape[0]
    Z = W @ U.T
    nz = np.linalg.norm(Z, axis=1)
    V = np.divide(Z, nz[:, None], out=np.zeros_like(Z), where=nz[:, None] > 0)
    packing = build_packing(k, 2 * math.sqrt(2 * zeta), seed)
    P = packing.points
    M = packing.M
    dist = np.linalg.norm(V[:, None, :] - P[None, :, :], axis=2)
    groups = [np.flatnonzero((dist[:, i] <= math.sqrt(2 * zeta) + 1e-12) & (nz > 0))
              for i in range(M)]
    for i, S in enumerate(groups):
        if len(S) == 0:
            raise ValueError(f"packing cell {i} has no neuron")
    A = min(len(S) // max(1, int(math.ceil(2 * math.log(len(S) * M / delta)))) for S in groups)
    A = max(A, 1)
    if check_good_event:
        width = r_b / A
        for i, S in enumerate(groups):
            slot = np.floor((b[S] + r_b) / width).astype(int)
            hit = np.zeros(2 * A, dtype=bool)
            hit[slot[(slot >= 0) & (slot < 2 * A)]] = True
            if not np.all(hit):
                l = int(np.flatnonzero(~hit)[0])
                raise ValueError(f"cell (i={i}, subinterval {l} = [{-r_b + l * width:.4g}, "
                                 f"{-r_b + (l + 1) * width:.4g})) contains no bias")
    x0, w0 = leggauss(nodes)
    a = np.zeros(N)
    if k == 1:
        for i, S in enumerate(groups):
            js, lo, hi = _bias_cells(b[S], S, r_b)
            half = 0.5 * (hi - lo)
            bb = 0.5 * (hi + lo)[:, None] + half[:, None] * x0
            vals = hhat.hhat(np.full((bb.size, 1), P[i, 0]), bb.ravel()).reshape(bb.shape)
            # tau_1 puts mass 1/2 on each of +-1
            a[js] = 0.5 * np.sum(vals * w0, axis=1) * half
    else:
        start, end = _arc_cells(P)
        for i, S in enumerate(groups):
            js, lo, hi = _bias_cells(b[S], S, r_b)
            th_half = 0.5 * (end[i] - start[i])
            th = 0.5 * (end[i] + start[i]) + th_half * x0
            Vq = np.column_stack([np.cos(th), np.sin(th)])
            half = 0.5 * (hi - lo)
            bb = 0.5 * (hi + lo)[:, None] + half[:, None] * x0
            tot = np.zeros(len(js))
            for vq, wt in zip(Vq, w0):
                vals = hhat.hhat(np.repeat(vq[None, :], bb.size, 0), bb.ravel()).reshape(bb.shape)
                tot += wt * np.sum(vals * w0, axis=1) * half
            a[js] = tot * th_half / (2 * math.pi)
    return RiemannResult(a, A, packing, groups, V)


def riemann_predict(res: RiemannResult, b: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """``sum_j a*_j relu(<v_j, z> + b_j)`` on points ``z`` of R^k."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    return np.maximum(Z @ res.directions.T + b, 0.0) @ res.a


# ---------------------------------------------------------------------------
# conditional expectation onto the index subspace


class ConditionalProjection:
    """``h(z) = E[f(x) | U x = z]`` under ``x ~ N(0, I_d)``, by Monte Carlo.

    With isotropic Gaussian inputs ``x = U^T z + P x'`` with ``P = I - U^T U`` and
    ``x'`` independent, so ``h(z) = mean_i f(U^T z + P x_i)`` over ``m`` fixed
    draws. Two-layer nets take a fast path that shares the off-subspace
    pre-activations across every ``z``. ``forward``/``grad_input`` expose
    ``x -> h(U x)`` as a predictor on R^d.
    """

    def __init__(self, f, U: np.ndarray, m: int = 200, seed: int = 0, chunk: int = 256):
        self.f = f
        self.U = check_orthonormal_rows(U)
        self.k, self.d = self.U.shape
        self.m = m
        self.chunk = chunk
        Xmc = stream(seed, "conditional-projection").standard_normal((m, self.d))
        self.Xperp = Xmc - (Xmc @ self.U.T) @ self.U
        if isinstance(f, TwoLayerNet):
            self._WU = f.W @ self.U.T
            self._xi = self.Xperp @ f.W.T + f.b

    def samples(self, Z) -> np.ndarray:
        """``f(U^T z + P x_i)`` for every z (rows) and draw i; shape ``(n, m)``."""
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        out = np.empty((Z.shape[0], self.m))
        for lo in range(0, Z.shape[0], self.chunk):
            Zc = Z[lo:lo + self.chunk]
            if isinstance(self.f, TwoLayerNet):
                pre = (Zc @ self._WU.T)[:, None, :] + self._xi[None, :, :]
                out[lo:lo + self.chunk] = self.f.act.value(pre) @ self.f.a
            else:
                pts = (Zc @ self.U)[:, None, :] + self.Xperp[None, :, :]
                fv = self.f(pts.reshape(-1, self.d))
                out[lo:lo + self.chunk] = np.asarray(fv).reshape(len(Zc), self.m)
        return out

    def __call__(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=np.float64)
        single = Z.ndim == 1
        out = self.samples(Z).mean(axis=1)
        return float(out[0]) if single else out

    def std_err(self, Z) -> np.ndarray:
        return self.samples(Z).std(axis=1, ddof=1) / math.sqrt(self.m)

    def forward(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        out = self(np.atleast_2d(X) @ self.U.T)
        return float(np.atleast_1d(out)[0]) if single else out

    def grad_input(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        Z = X @ self.U.T
        G = np.empty((len(Z), self.k))
        if isinstance(self.f, TwoLayerNet):
            for lo in range(0, len(Z), self.chunk):
                Zc = Z[lo:lo + self.chunk]
                pre = (Zc @ self._WU.T)[:, None, :] + self._xi[None, :, :]
                D = self.f.act.deriv(pre).mean(axis=1) * self.f.a
                G[lo:lo + self.chunk] = D @ self._WU
        else:
            for i, z in enumerate(Z):
                pts = z @ self.U + self.Xperp
                G[i] = self.f.grad_input(pts).mean(axis=0) @ self.U.T
        out = G @ self.U
        return out[0] if single else out


def conditional_projection(f, U: np.ndarray, m: int = 200, seed: int = 0) -> ConditionalProjection:
    return ConditionalProjection(f, U, m, seed)
