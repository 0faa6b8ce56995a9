"""Feature-learning oracles and their conformance checks.

The two learners return first-layer weights with unit rows. The checkers take
any such ``W`` and measure how well it covers the target subspace:

* deterministic coverage: for every unit ``u`` in ``span(U)`` the fraction of rows
  with ``<w_i, u> >= 1 - zeta`` is at least ``alpha * zeta^((k-1)/2)``. Only a
  finite set of probes (a packing of the subspace sphere) can be tested.
* stochastic coverage: the rows with ``||w_i - U^T U w_i||^2 <= zeta``, together with
  a histogram of their in-subspace directions over packing cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from robustfl.data import DataStream, Dataset, MultiIndexTask
from robustfl.model import Activation, check_orthonormal_rows
from robustfl.rng import stream, uniform_sphere


@dataclass
class OracleParams:
    zeta: float
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not 0 < self.zeta < 1:
            raise ValueError("zeta must lie in (0, 1)")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")


@dataclass
class PackingSet:
    points: np.ndarray
    radius: float

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if np.max(np.abs(np.linalg.norm(self.points, axis=1) - 1.0)) > 1e-12:
            raise ValueError("packing points must be unit vectors")

    @property
    def M(self) -> int:
        return self.points.shape[0]

    def min_distance(self) -> float:
        if self.M < 2:
            return math.inf
        G = self.points @ self.points.T
        D2 = np.maximum(2.0 - 2.0 * G, 0.0)
        np.fill_diagonal(D2, np.inf)
        return float(np.sqrt(D2.min()))

    def nearest(self, V: np.ndarray) -> np.ndarray:
        """Index of the nearest packing point for each row of ``V``; ties go to the lowest index."""
        return np.argmax(np.atleast_2d(V) @ self.points.T, axis=1)


@dataclass
class OracleReport:
    zeta: float
    k: int
    fractions: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha_hat: float = float("nan")
    S: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cell_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    N: int = 0

    def passes(self, alpha: float) -> bool:
        return bool(self.alpha_hat >= alpha)

    @property
    def S_fraction(self) -> float:
        return len(self.S) / self.N if self.N else 0.0

    @property
    def empty_cells(self) -> np.ndarray:
        return np.flatnonzero(self.cell_counts == 0)

    def to_dict(self) -> dict:
        return {"zeta": self.zeta, "k": self.k, "N": self.N,
                "fractions": self.fractions.tolist(), "alpha_hat": self.alpha_hat,
                "S": self.S.tolist(), "S_fraction": self.S_fraction,
                "residuals": self.residuals.tolist(),
                "cell_counts": self.cell_counts.tolist(),
                "empty_cells": self.empty_cells.tolist()}


def cap_count_bound(k: int, radius: float) -> int:
    """Volumetric upper bound on the size of a ``radius``-packing of S^{k-1}."""
    if k == 1:
        return 2
    if k == 2:
        return int(math.ceil(2 * math.pi / (2 * math.asin(radius / 2))))
    # caps of chordal radius r/2 are disjoint; compare surface fractions
    theta = 2 * math.asin(min(radius / 4, 1.0))
    from scipy.special import betainc
    frac = 0.5 * betainc((k - 1) / 2, 0.5, math.sin(theta) ** 2)
    return int(math.ceil(1.0 / frac))


def build_packing(k: int, radius: float, seed: int = 0,
                  max_rejections: int | None = None) -> PackingSet:
    """Greedy maximal packing of the unit sphere in R^k.

    k = 1 is {+1, -1}. For k = 2 points are placed by an angular sweep from a
    random offset, which is maximal and hits the arc count up to one point.
    For k >= 3 uniform candidates are accepted greedily until
    ``max_rejections`` consecutive candidates fall inside existing caps.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 < radius < 2:
        if k == 1 and radius == 2:
            return PackingSet(np.array([[1.0], [-1.0]]), radius)
        raise ValueError("radius must lie in (0, 2)")
    if k == 1:
        return PackingSet(np.array([[1.0], [-1.0]]), radius)
    rng = stream(seed, "packing", k)
    if k == 2:
        step = 2 * math.asin(radius / 2)
        m = int(math.floor(2 * math.pi / step + 1e-12))
        theta = rng.uniform(0, 2 * math.pi) + step * np.arange(m)
        return PackingSet(np.column_stack([np.cos(theta), np.sin(theta)]), radius)
    M_bound = cap_count_bound(k, radius)
    if max_rejections is None:
        max_rejections = 10_000 * M_bound
    thresh = 1.0 - radius * radius / 2  # <p, q> <= thresh  <=>  ||p - q|| >= radius
    kept = uniform_sphere(rng, 1, k)
    rejected = 0
    while rejected < max_rejections:
        cand = uniform_sphere(rng, 4096, k)
        G = cand @ kept.T
        ok = np.all(G <= thresh, axis=1)
        for i in range(len(cand)):
            if ok[i] and np.all(kept @ cand[i] <= thresh):
                kept = np.vstack([kept, cand[i]])
                rejected = 0
            else:
                rejected += 1
                if rejected >= max_rejections:
                    break
    return PackingSet(kept, radius)


def _check_unit_rows(W: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if np.max(np.abs(np.linalg.norm(W, axis=1) - 1.0)) > tol:
        raise ValueError("rows of W must be unit norm")
    return W


def check_dfl(W: np.ndarray, U: np.ndarray, zeta: float, seed: int = 0,
              probes: PackingSet | None = None) -> OracleReport:
    W = _check_unit_rows(W)
    U = check_orthonormal_rows(U)
    k = U.shape[0]
    if probes is None:
        probes = build_packing(k, math.sqrt(2 * zeta), seed)
    P = probes.points @ U
    fractions = np.mean(W @ P.T >= 1.0 - zeta, axis=0)
    alpha_hat = float(fractions.min() / zeta ** ((k - 1) / 2))
    return OracleReport(zeta=zeta, k=k, fractions=fractions, alpha_hat=alpha_hat, N=W.shape[0])


def check_sfl_alignment(W: np.ndarray, U: np.ndarray, zeta: float, seed: int = 0,
                        cells: PackingSet | None = None) -> OracleReport:
    W = _check_unit_rows(W)
    U = check_orthonormal_rows(U)
    k = U.shape[0]
    Z = W @ U.T
    residuals = np.sum((W - Z @ U) ** 2, axis=1)
    # closed inequality; the slack absorbs rounding in the residual itself
    S = np.flatnonzero(residuals <= zeta + 1e-12)
    if cells is None:
        cells = build_packing(k, math.sqrt(2 * zeta), seed)
    counts = np.zeros(cells.M, dtype=int)
    ZS = Z[S]
    nz = np.linalg.norm(ZS, axis=1) > 0
    if np.any(nz):
        V = ZS[nz] / np.linalg.norm(ZS[nz], axis=1, keepdims=True)
        counts = np.bincount(cells.nearest(V), minlength=cells.M)
    return OracleReport(zeta=zeta, k=k, S=S, residuals=residuals, cell_counts=counts,
                        N=W.shape[0])


@dataclass
class Alg2Config:
    eta: float = 0.005
    zeta_interp: float = 0.5
    q: int = 4
    r_l: list[float] | None = None
    r_a: float = 1.0
    seed: int = 0

    def radii(self) -> np.ndarray:
        r = np.ones(self.q) if self.r_l is None else np.asarray(self.r_l, dtype=np.float64)
        if r.shape != (self.q,):
            raise ValueError(f"r_l needs {self.q} entries")
        return r


def alg2_single_index_fl(task: MultiIndexTask, N: int, T: int, cfg: Alg2Config | None = None,
                         eta_schedule=None, zeta_schedule=None, on_step=None) -> np.ndarray:
    """Online spherical SGD with per-neuron Hermite activations and even-step interpolation.

    Two gradient steps are taken on every fresh sample. At even ``t > 0`` each row
    is first pulled toward its value two steps back,
    ``w <- w - zeta_t (w^t - w^{t-2})``, and renormalized. ``eta_schedule(t)``
    and ``zeta_schedule(t)`` override the constant defaults in ``cfg``.
    """
    cfg = cfg or Alg2Config()
    if task.k != 1:
        raise ValueError("the single-index learner needs a task with k = 1")
    d = task.d
    rng = stream(cfg.seed, "alg2-init")
    W = uniform_sphere(rng, N, d)
    a = rng.choice([-1.0, 1.0], size=N) * cfg.r_a / N
    beta = rng.choice([-1.0, 1.0], size=(N, cfg.q)) * cfg.radii()
    act = Activation("hermite_mix", beta=beta)
    data = DataStream(task, cfg.seed, "alg2-samples")
    sample = data.next(1)
    prev2 = W.copy()
    prev1 = W.copy()
    for t in range(T):
        if t > 0 and t % 2 == 0:
            sample = data.next(1)
            z = cfg.zeta_interp if zeta_schedule is None else zeta_schedule(t)
            W = W - z * (W - prev2)
            W /= np.linalg.norm(W, axis=1, keepdims=True)
        x, y = sample.X[0], sample.y[0]
        pre = W @ x
        r = float(act.value(pre[None, :])[0] @ a - y)
        g = (2.0 * r * a * act.deriv(pre[None, :])[0])[:, None] * x[None, :]
        g -= np.sum(g * W, axis=1, keepdims=True) * W
        eta = cfg.eta if eta_schedule is None else eta_schedule(t)
        prev2, prev1 = prev1, W
        W = W - eta * g
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        if on_step is not None:
            on_step(t, W)
    return W


def orthogonalize_labels(X: np.ndarray, y: np.ndarray, mode: str = "ols") -> np.ndarray:
    """Remove the constant and linear parts of ``y``.

    ``ols`` regresses ``y`` on ``(1, x)`` so the residual is exactly orthogonal to
    both. ``moment`` subtracts ``mean(y)`` and ``<mean(y x), x>``, which is the same
    in expectation under isotropic inputs.
    """
    if mode == "ols":
        A = np.column_stack([np.ones(len(y)), X])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        r = y - A @ coef
        # one refinement pass tightens orthogonality to rounding level
        coef2, *_ = np.linalg.lstsq(A, r, rcond=None)
        return r - A @ coef2
    if mode == "moment":
        return y - y.mean() - X @ (X.T @ y / len(y))
    raise ValueError("mode must be 'ols' or 'moment'")


def alg3_init(N: int, d: int, r_a: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if N % 2:
        raise ValueError(f"N must be even, got {N}")
    rng = stream(seed, "alg3-init")
    half = N // 2
    W0 = uniform_sphere(rng, half, d)
    a0 = rng.choice([-1.0, 1.0], size=half) * r_a
    # neuron N-1-j mirrors neuron j
    W = np.vstack([W0, W0[::-1]])
    a = np.concatenate([a0, -a0[::-1]])
    return a, W


def alg3_multi_index_fl(data: Dataset, N: int, r_a: float = 1.0, seed: int = 0,
                        preprocess: str = "ols") -> np.ndarray:
    """One full-batch gradient step from a symmetric, output-zero ReLU network."""
    X, y = data.X, data.y
    n, d = X.shape
    a, W0 = alg3_init(N, d, r_a, seed)
    y = orthogonalize_labels(X, y, preprocess)
    pre = X @ W0.T
    f = np.maximum(pre, 0.0) @ a
    r = f - y
    G = (2.0 / n) * ((r[:, None] * (pre > 0)) * a).T @ X
    W = -G
    nrm = np.linalg.norm(W, axis=1, keepdims=True)
    if np.any(nrm == 0):
        raise ValueError("a neuron received a zero gradient")
    return W / nrm


def pca_subspace_estimate(W: np.ndarray, k: int) -> np.ndarray:
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if W.shape[0] < k:
        raise ValueError(f"need at least k={k} rows")
    _, s, Vt = np.linalg.svd(W, full_matrices=False)
    if s[k - 1] <= 1e-12 * max(s[0], 1e-300):
        raise ValueError(f"W has rank below k={k}")
    return Vt[:k]


def subspace_alignment(U_hat: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Principal angles between the row spaces, ascending.

    Cosines lose precision near 0, so angles below pi/4 come from the sines
    (singular values of the part of ``U_hat`` outside span(U)).
    """
    U_hat = check_orthonormal_rows(U_hat)
    U = check_orthonormal_rows(U)
    k = min(U_hat.shape[0], U.shape[0])
    A, B = (U_hat, U) if U_hat.shape[0] <= U.shape[0] else (U, U_hat)
    cos = np.clip(np.linalg.svd(A @ B.T, compute_uv=False)[:k], 0.0, 1.0)
    sin = np.clip(np.linalg.svd(A - (A @ B.T) @ B, compute_uv=False)[:k][::-1], 0.0, 1.0)
    ang = np.where(cos * cos >= 0.5, np.arcsin(sin), np.arccos(cos))
    return np.sort(ang)
