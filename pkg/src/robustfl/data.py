"""Multi-index regression tasks with isotropic Gaussian inputs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from robustfl.rng import stream

LINK_KINDS = ("identity", "relu", "tanh", "he2", "polynomial", "hermite_series")
_UNIVARIATE = ("identity", "relu", "tanh", "he2", "hermite_series")
_KIND_ALIASES = {k.replace("_", ""): k for k in LINK_KINDS}


def hermite_eval(j: int, z):
    """Normalized probabilists' Hermite polynomial He_j(z) / sqrt(j!).

    Orthonormal under N(0, 1). Accepts scalars or arrays.
    """
    if j < 0:
        raise ValueError(f"degree must be >= 0, got {j}")
    z = np.asarray(z, dtype=np.float64)
    prev = np.ones_like(z)
    if j == 0:
        return prev if prev.ndim else float(prev)
    cur = z.copy()
    for n in range(1, j):
        prev, cur = cur, z * cur - n * prev
    out = cur / math.sqrt(math.factorial(j))
    return out if out.ndim else float(out)


def hermite_table(q: int, z: np.ndarray) -> np.ndarray:
    """Stack [He_0(z), ..., He_q(z)] (normalized) along a new last axis."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty(z.shape + (q + 1,))
    out[..., 0] = 1.0
    if q >= 1:
        out[..., 1] = z
    # unnormalized recurrence, rescaled at the end
    for n in range(1, q):
        out[..., n + 1] = z * out[..., n] - n * out[..., n - 1]
    norms = np.sqrt([math.factorial(n) for n in range(q + 1)])
    return out / norms


def _check_symmetric(t: np.ndarray, tol: float = 1e-12) -> None:
    s = t.ndim
    for ax in range(s - 1):
        perm = list(range(s))
        perm[ax], perm[ax + 1] = perm[ax + 1], perm[ax]
        if np.max(np.abs(t - np.transpose(t, perm)), initial=0.0) > tol:
            raise ValueError(f"order-{s} tensor is not symmetric")


def contract_sym(t: np.ndarray, z: np.ndarray) -> np.ndarray:
    """T[z^{(x) s}] for a batch z of shape (n, k); returns shape (n,)."""
    out = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],) + t.shape)
    for _ in range(t.ndim):
        out = np.einsum("n...i,ni->n...", out, z)
    return out


@dataclass
class LinkFunction:
    kind: str
    arity: int = 1
    tensors: list[np.ndarray] = field(default_factory=list)
    coefficients: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise ValueError(f"unknown link kind {self.kind!r}")
        if self.kind in _UNIVARIATE and self.arity != 1:
            raise ValueError(f"link {self.kind!r} is univariate, got arity {self.arity}")
        if self.kind == "polynomial":
            if not self.tensors:
                raise ValueError("polynomial link needs at least one tensor")
            self.tensors = [np.asarray(t, dtype=np.float64) for t in self.tensors]
            for s, t in enumerate(self.tensors):
                if t.shape != (self.arity,) * s:
                    raise ValueError(f"T^({s}) has shape {t.shape}, expected {(self.arity,) * s}")
                _check_symmetric(t)

    @classmethod
    def polynomial(cls, tensors: Sequence) -> LinkFunction:
        tensors = [np.asarray(t, dtype=np.float64) for t in tensors]
        k = next((t.shape[0] for t in tensors if t.ndim), 1)
        return cls("polynomial", arity=k, tensors=tensors)

    def __call__(self, z) -> np.ndarray | float:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = z[None, :] if single else z
        if zb.ndim != 2 or zb.shape[1] != self.arity:
            raise ValueError(f"link of arity {self.arity} got input of shape {z.shape}")
        out = self._eval(zb)
        return float(out[0]) if single else out

    def _eval(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "polynomial":
            return sum(contract_sym(t, z) for t in self.tensors)
        s = z[:, 0]
        if self.kind == "identity":
            return s.copy()
        if self.kind == "relu":
            return np.maximum(s, 0.0)
        if self.kind == "tanh":
            return np.tanh(s)
        if self.kind == "he2":
            return (s * s - 1.0) / math.sqrt(2.0)
        coef = np.asarray(self.coefficients, dtype=np.float64)
        return hermite_table(len(coef) - 1, s) @ coef

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "polynomial":
            out["tensors"] = [t.tolist() for t in self.tensors]
        if self.kind == "hermite_series":
            out["coefficients"] = list(map(float, self.coefficients))
        return out

    @classmethod
    def from_dict(cls, spec: dict) -> LinkFunction:
        kind = _KIND_ALIASES.get(spec["kind"].lower().replace("_", ""), spec["kind"])
        if kind == "polynomial":
            return cls.polynomial(spec["tensors"])
        return cls(kind, coefficients=list(spec.get("coefficients", [])))


def link_eval(link: LinkFunction, z) -> float:
    return link(z)


def orthonormalize_rows(a: np.ndarray) -> np.ndarray:
    """Gram-Schmidt with one re-orthogonalization pass per row."""
    q = np.zeros_like(a, dtype=np.float64)
    for i, row in enumerate(np.asarray(a, dtype=np.float64)):
        v = row.copy()
        for _ in range(2):
            v -= q[:i].T @ (q[:i] @ v)
        nrm = np.linalg.norm(v)
        if nrm < 1e-12:
            raise ValueError("rows are linearly dependent")
        q[i] = v / nrm
    return q


@dataclass
class MultiIndexTask:
    d: int
    k: int
    U: np.ndarray
    link: LinkFunction
    noise_std: float = 0.0

    def __post_init__(self):
        self.U = np.atleast_2d(np.asarray(self.U, dtype=np.float64))
        if not (1 <= self.k <= self.d):
            raise ValueError(f"need 1 <= k <= d, got k={self.k}, d={self.d}")
        if self.U.shape != (self.k, self.d):
            raise ValueError(f"U has shape {self.U.shape}, expected {(self.k, self.d)}")
        if not np.all(np.isfinite(self.U)):
            raise ValueError("U has non-finite entries")
        if np.max(np.abs(self.U @ self.U.T - np.eye(self.k))) > 1e-12:
            raise ValueError("rows of U are not orthonormal")
        if self.link.arity != self.k:
            raise ValueError(f"link arity {self.link.arity} != k={self.k}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @classmethod
    def random(cls, d: int, k: int, link: LinkFunction, noise_std: float = 0.0,
               seed: int = 0) -> MultiIndexTask:
        U = orthonormalize_rows(stream(seed, "task-U").standard_normal((k, d)))
        return cls(d, k, U, link, noise_std)

    @classmethod
    def single_index(cls, d: int, link: str | LinkFunction, seed: int = 0,
                     noise_std: float = 0.0) -> MultiIndexTask:
        if isinstance(link, str):
            link = LinkFunction(link)
        return cls.random(d, 1, link, noise_std, seed)

    def target(self, X: np.ndarray) -> np.ndarray:
        return self.link(X @ self.U.T)

    def to_dict(self) -> dict:
        return {"d": self.d, "k": self.k, "U": self.U.tolist(),
                "link": self.link.to_dict(), "noise_std": self.noise_std}

    @classmethod
    def from_dict(cls, spec: dict) -> MultiIndexTask:
        return cls(int(spec["d"]), int(spec["k"]), np.asarray(spec["U"], dtype=np.float64),
                   LinkFunction.from_dict(spec["link"]), float(spec.get("noise_std", 0.0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> MultiIndexTask:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError(f"inconsistent shapes X{self.X.shape}, y{self.y.shape}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset has non-finite entries")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> Dataset:
        return Dataset(self.X[idx], self.y[idx], self.seed)

    def to_csv(self, path) -> None:
        d = self.X.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(d)] + ["y"])
            for xi, yi in zip(self.X, self.y):
                w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])

    @classmethod
    def from_csv(cls, path) -> Dataset:
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(arr[:, :-1].copy(), arr[:, -1].copy())


def sample_gaussian_inputs(n: int, d: int, seed: int, tag: str = "inputs") -> np.ndarray:
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    return stream(seed, tag).standard_normal((n, d))


def gen_dataset(task: MultiIndexTask, n: int, seed: int) -> Dataset:
    X = sample_gaussian_inputs(n, task.d, seed)
    y = task.target(X)
    if task.noise_std > 0:
        y = y + task.noise_std * stream(seed, "noise").standard_normal(n)
    return Dataset(X, y, seed)


class DataStream:
    """Online sampler: every call returns a fresh i.i.d. batch."""

    def __init__(self, task: MultiIndexTask, seed: int, tag: str = "train-stream"):
        self.task = task
        self._rng = stream(seed, tag)
        self.consumed = 0

    def next(self, batch: int) -> Dataset:
        X = self._rng.standard_normal((batch, self.task.d))
        y = self.task.target(X)
        if self.task.noise_std > 0:
            y = y + self.task.noise_std * self._rng.standard_normal(batch)
        self.consumed += batch
        return Dataset(X, y)
