"""Two-layer networks ``f(x) = sum_j a_j sigma_j(<w_j, x> + b_j)`` with hand-derived gradients.

Inputs are handled in batches: ``X`` has shape ``(n, d)`` and a single vector is
promoted to a batch of one. ReLU's derivative at exactly 0 is taken to be 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from robustfl.data import hermite_table

ACT_KINDS = ("relu", "tanh", "polynomial", "hermite_mix")


@dataclass
class Activation:
    """Pointwise nonlinearity.

    ``polynomial`` uses monomial coefficients ``coeffs[i] * z**i``.
    ``hermite_mix`` gives neuron j its own ``sum_{l=1..q} beta[j, l-1] He_l(z)``
    with normalized Hermite polynomials.
    """

    kind: str
    coeffs: np.ndarray | None = None
    beta: np.ndarray | None = None

    def __post_init__(self):
        self.kind = self.kind.lower().replace("_", "")
        self.kind = {"hermitemix": "hermite_mix"}.get(self.kind, self.kind)
        if self.kind not in ACT_KINDS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "polynomial":
            if self.coeffs is None or len(self.coeffs) == 0:
                raise ValueError("polynomial activation needs coefficients")
            self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.kind == "hermite_mix":
            if self.beta is None:
                raise ValueError("hermite_mix activation needs a beta matrix")
            self.beta = np.atleast_2d(np.asarray(self.beta, dtype=np.float64))

    def value(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        if self.kind == "tanh":
            return np.tanh(z)
        if self.kind == "polynomial":
            return np.polynomial.polynomial.polyval(z, self.coeffs)
        H = hermite_table(self.beta.shape[1], z)
        return np.einsum("...jl,jl->...j", H[..., 1:], self.beta)

    def deriv(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return (z > 0).astype(np.float64)
        if self.kind == "tanh":
            return 1.0 - np.tanh(z) ** 2
        if self.kind == "polynomial":
            return np.polynomial.polynomial.polyval(z, np.polynomial.polynomial.polyder(self.coeffs))
        q = self.beta.shape[1]
        # He_l' = sqrt(l) He_{l-1} for normalized polynomials
        H = hermite_table(q - 1, z)
        scale = np.sqrt(np.arange(1, q + 1))
        return np.einsum("...jl,jl->...j", H, self.beta * scale)

    def lipschitz(self) -> float:
        if self.kind in ("relu", "tanh"):
            return 1.0
        raise ValueError(f"{self.kind} activation is not globally Lipschitz")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "polynomial":
            out["coeffs"] = self.coeffs.tolist()
        if self.kind == "hermite_mix":
            out["beta"] = self.beta.tolist()
        return out

    @classmethod
    def from_dict(cls, spec: dict) -> Activation:
        return cls(spec["kind"], spec.get("coeffs"), spec.get("beta"))


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


@dataclass
class TwoLayerNet:
    a: np.ndarray
    W: np.ndarray
    b: np.ndarray
    act: Activation
    unit_rows: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64).ravel()
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64).ravel()
        N = self.a.shape[0]
        if self.W.shape[0] != N or self.b.shape[0] != N:
            raise ValueError(f"shape mismatch: a{self.a.shape}, W{self.W.shape}, b{self.b.shape}")
        for name in ("a", "W", "b"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")
        if self.act.kind == "hermite_mix" and self.act.beta.shape[0] != N:
            raise ValueError(f"hermite_mix has {self.act.beta.shape[0]} rows, net has {N} neurons")
        if self.unit_rows and np.max(np.abs(np.linalg.norm(self.W, axis=1) - 1.0)) > 1e-9:
            raise ValueError("unit_rows set but some ||w_j|| differs from 1")

    @property
    def N(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def _check(self, X: np.ndarray) -> None:
        if X.ndim != 2 or X.shape[1] != self.d:
            raise ValueError(f"net expects inputs of dimension {self.d}, got shape {X.shape}")

    def preact(self, X: np.ndarray) -> np.ndarray:
        return X @ self.W.T + self.b

    def forward(self, x):
        X, single = _as_batch(x)
        self._check(X)
        out = self.act.value(self.preact(X)) @ self.a
        return float(out[0]) if single else out

    __call__ = forward

    def grad_params(self, X: np.ndarray, y: np.ndarray):
        """Gradient of the mean squared loss. Returns ``(ga, gW, gb, loss)``."""
        X, _ = _as_batch(X)
        self._check(X)
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        Z = self.preact(X)
        S = self.act.value(Z)
        r = S @ self.a - y
        n = X.shape[0]
        ga = 2.0 * S.T @ r / n
        G = (2.0 / n) * r[:, None] * self.act.deriv(Z) * self.a
        return ga, G.T @ X, G.sum(axis=0), float(np.mean(r * r))

    def grad_input(self, x):
        X, single = _as_batch(x)
        self._check(X)
        out = (self.act.deriv(self.preact(X)) * self.a) @ self.W
        return out[0] if single else out

    def copy(self, **changes) -> TwoLayerNet:
        kw = dict(a=self.a.copy(), W=self.W.copy(), b=self.b.copy(), act=self.act,
                  unit_rows=self.unit_rows, meta=dict(self.meta))
        kw.update(changes)
        return TwoLayerNet(**kw)

    def to_dict(self) -> dict:
        meta = {"seed": None, "phase": ""}
        meta.update(self.meta)
        return {"d": self.d, "N": self.N, "act": self.act.to_dict(), "a": self.a.tolist(),
                "W": self.W.tolist(), "b": self.b.tolist(), "meta": meta}

    @classmethod
    def from_dict(cls, spec: dict) -> TwoLayerNet:
        net = cls(spec["a"], spec["W"], spec["b"], Activation.from_dict(spec["act"]),
                  meta=dict(spec.get("meta", {})))
        if net.d != spec["d"] or net.N != spec["N"]:
            raise ValueError("checkpoint header disagrees with parameter shapes")
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> TwoLayerNet:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class LinearPredictor:
    """x -> <w, x>; used wherever the exact attack and closed-form risks apply."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).ravel()

    @property
    def d(self) -> int:
        return self.w.shape[0]

    def forward(self, x):
        X, single = _as_batch(x)
        out = X @ self.w
        return float(out[0]) if single else out

    __call__ = forward

    def grad_input(self, x):
        X, single = _as_batch(x)
        out = np.broadcast_to(self.w, X.shape).copy()
        return out[0] if single else out


def linear_neuron(w: np.ndarray) -> TwoLayerNet:
    """Single neuron with identity activation, equal to x -> <w, x>."""
    w = np.asarray(w, dtype=np.float64)
    return TwoLayerNet(np.ones(1), w[None, :], np.zeros(1), Activation("polynomial", [0.0, 1.0]))


def check_orthonormal_rows(U: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    if U.shape[0] > U.shape[1] or np.max(np.abs(U @ U.T - np.eye(U.shape[0]))) > tol:
        raise ValueError("matrix rows are not orthonormal")
    return U


def project_to_subspace(net: TwoLayerNet, U_hat: np.ndarray) -> TwoLayerNet:
    """Reduced k-input net with rows ``U_hat w_j``.

    ``reduced(U_hat x) == net(U_hat^T U_hat x)`` exactly. The per-neuron residual
    norms ``||w_j - U_hat^T U_hat w_j||`` are stored in ``meta["residual_norms"]``.
    """
    U_hat = check_orthonormal_rows(U_hat)
    if U_hat.shape[1] != net.d:
        raise ValueError(f"U_hat has {U_hat.shape[1]} columns, net has d={net.d}")
    Wk = net.W @ U_hat.T
    resid = np.linalg.norm(net.W - Wk @ U_hat, axis=1)
    meta = dict(net.meta)
    meta["residual_norms"] = resid.tolist()
    return TwoLayerNet(net.a.copy(), Wk, net.b.copy(), net.act, meta=meta)


def projection_error_bound(net: TwoLayerNet, U_hat: np.ndarray, x: np.ndarray) -> float:
    """``sum_j |a_j| Lip(sigma) ||w_j - U_hat^T U_hat w_j|| ||x||`` for Lipschitz activations."""
    U_hat = check_orthonormal_rows(U_hat)
    resid = np.linalg.norm(net.W - net.W @ U_hat.T @ U_hat, axis=1)
    return float(np.sum(np.abs(net.a) * resid) * net.act.lipschitz() * np.linalg.norm(x))


def random_net(d: int, N: int, act: Activation | str, rng: np.random.Generator,
               scale: float = 1.0) -> TwoLayerNet:
    if isinstance(act, str):
        act = Activation(act)
    return TwoLayerNet(scale * rng.standard_normal(N), rng.standard_normal((N, d)) / math.sqrt(d),
                       rng.standard_normal(N), act)
