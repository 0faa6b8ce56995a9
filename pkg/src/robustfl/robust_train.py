"""Robust training of two-layer networks.

Second-layer fitting with frozen random features, full adversarial training of
every layer, standard training, and the hyperparameter calculator that turns a
target tolerance into radii, widths and sample sizes.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from robustfl.adversary import AttackConfig, pgd_attack
from robustfl.data import DataStream, Dataset
from robustfl.model import Activation, TwoLayerNet
from robustfl.rng import stream, uniform_sphere

RELU = Activation("relu")


@dataclass
class Phase2Config:
    r_a: float = 10.0
    r_b: float = 3.0
    n_FA: int = 2000
    lr: float | None = None
    iters: int = 1000
    batch: int = 300
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig.from_dict(self.attack)
        if self.r_a <= 0:
            raise ValueError("r_a must be > 0")
        if self.r_b < 0:
            raise ValueError("r_b must be >= 0")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be > 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["attack"] = self.attack.to_dict()
        return out


@dataclass
class TraceRecord:
    iter: int
    samples: int
    batch_adv_loss: float
    robust_test_risk: float | None = None
    std_test_risk: float | None = None
    wall_s: float = 0.0


TRACE_COLUMNS = ("iter", "samples", "batch_adv_loss", "robust_test_risk", "std_test_risk", "wall_s")


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.iter <= self.records[-1].iter:
            raise ValueError("trace iterations must be strictly increasing")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in TRACE_COLUMNS])


def project_ball(a: np.ndarray, radius: float) -> np.ndarray:
    nrm = np.linalg.norm(a)
    return a * (radius / nrm) if nrm > radius else a


def init_phase2(N: int, r_b: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if N < 1:
        raise ValueError("N must be >= 1")
    b = stream(seed, "phase2-init").uniform(-r_b, r_b, size=N) if r_b > 0 else np.zeros(N)
    return np.zeros(N), b


def attack_batch(net: TwoLayerNet, X: np.ndarray, y: np.ndarray, attack: AttackConfig,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    if attack.epsilon == 0:
        return np.zeros_like(X)
    return pgd_attack(net, X, y, attack, rng)


def empirical_adv_risk(a, W, b, data: Dataset, attack: AttackConfig, act: Activation = RELU,
                       deltas: np.ndarray | None = None, return_deltas: bool = False):
    """Mean attacked squared loss. Passing ``deltas`` freezes the attack."""
    net = TwoLayerNet(a, W, b, act)
    if deltas is None:
        deltas = attack_batch(net, data.X, data.y, attack)
    val = float(np.mean((net.forward(data.X + deltas) - data.y) ** 2))
    return (val, deltas) if return_deltas else val


def _features(W, b, act, X):
    return act.value(X @ W.T + b)


def robust_fit_second_layer(W: np.ndarray, b: np.ndarray, data: Dataset | DataStream,
                            cfg: Phase2Config, act: Activation = RELU,
                            a0: np.ndarray | None = None,
                            on_iter: Callable | None = None) -> tuple[np.ndarray, TrainTrace]:
    """Projected gradient descent-ascent on ``a`` with ``W`` and ``b`` frozen.

    Each step attacks the batch with PGD at the current ``a``, takes a gradient
    step on the attacked loss and rescales ``a`` back into
    ``{||a|| <= r_a / sqrt(N)}``. ``data`` is either a fixed sample (minibatches
    drawn with replacement, or the whole sample when ``batch >= n``) or an
    online stream.
    """
    W = np.array(W, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    N = W.shape[0]
    radius = cfg.r_a / math.sqrt(N)
    a = np.zeros(N) if a0 is None else project_ball(np.array(a0, dtype=np.float64), radius)
    rng = stream(cfg.seed, "phase2-batches")
    if isinstance(data, Dataset):
        if len(data) == 0:
            raise ValueError("empty dataset")
        full = cfg.batch >= len(data)
    lr = cfg.lr
    trace = TrainTrace()
    t0 = time.perf_counter()
    samples = 0
    for it in range(1, cfg.iters + 1):
        if isinstance(data, DataStream):
            batch = data.next(cfg.batch)
        elif full:
            batch = data
        else:
            batch = data.subset(rng.integers(0, len(data), size=cfg.batch))
        samples += len(batch)
        if lr is None:
            # 1 / smoothness of the clean least-squares objective on the first batch
            F = _features(W, b, act, batch.X)
            lr = len(batch) / (2.0 * np.linalg.norm(F, 2) ** 2)
        net = TwoLayerNet(a, W, b, act)
        delta = attack_batch(net, batch.X, batch.y, cfg.attack)
        F = _features(W, b, act, batch.X + delta)
        r = F @ a - batch.y
        loss = float(np.mean(r * r))
        g = 2.0 * F.T @ r / len(batch)
        a = project_ball(a - lr * g, radius)
        trace.append(TraceRecord(it, samples, loss, wall_s=time.perf_counter() - t0))
        if on_iter is not None:
            on_iter(it, a)
    return a, trace


def constrained_least_squares(F: np.ndarray, y: np.ndarray, radius: float) -> np.ndarray:
    """Solve ``min ||F a - y||^2 / n`` subject to ``||a|| <= radius`` directly.

    Uses the eigendecomposition of ``F^T F``: either the minimum-norm least-squares
    solution is feasible, or the solution is ``(F^T F + lam I)^{-1} F^T y`` with
    ``lam > 0`` chosen so that the norm equals ``radius``.
    """
    A = F.T @ F
    c = F.T @ y
    evals, V = np.linalg.eigh(A)
    evals = np.maximum(evals, 0.0)
    ct = V.T @ c
    tol = 1e-12 * max(evals[-1], 1e-300)
    pos = evals > tol
    a_ls = V[:, pos] @ (ct[pos] / evals[pos])
    if np.linalg.norm(a_ls) <= radius:
        return a_ls

    def excess(lam):
        return np.linalg.norm(ct[pos] / (evals[pos] + lam)) - radius

    hi = max(np.linalg.norm(c) / radius, 1e-12)
    while excess(hi) > 0:
        hi *= 2
    lam = brentq(excess, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return V[:, pos] @ (ct[pos] / (evals[pos] + lam))


# ---------------------------------------------------------------------------
# full training loops


@dataclass
class TrainConfig:
    iters: int = 2000
    batch: int = 300
    lr: float = 0.05
    lr_first: float | None = None
    attack: AttackConfig = field(default_factory=AttackConfig)
    freeze_first_layer: bool = False
    train_bias: bool = True
    train_second: bool = True
    probe_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig.from_dict(self.attack)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["attack"] = self.attack.to_dict()
        return out


def default_init(d: int, N: int, seed: int) -> TwoLayerNet:
    """W uniform on the sphere, a ~ N(0, 1/N^2), b ~ N(0, 1).

    ``a`` and ``b`` come from a stream that does not depend on ``W``, so runs
    that replace ``W`` still share the same second layer and biases.
    """
    W = uniform_sphere(stream(seed, "first-layer-init"), N, d)
    ab = stream(seed, "second-layer-init")
    a = ab.standard_normal(N) / N
    b = ab.standard_normal(N)
    return TwoLayerNet(a, W, b, Activation("relu"))


def adversarial_train_full(net: TwoLayerNet, data: DataStream, cfg: TrainConfig,
                           probe: Callable[[TwoLayerNet], tuple[float, float]] | None = None
                           ) -> tuple[TwoLayerNet, TrainTrace]:
    """Online adversarial SGD: each iteration draws a fresh batch, attacks it, and steps."""
    a, W, b = net.a.copy(), net.W.copy(), net.b.copy()
    lr1 = cfg.lr if cfg.lr_first is None else cfg.lr_first
    trace = TrainTrace()
    t0 = time.perf_counter()
    for it in range(1, cfg.iters + 1):
        batch = data.next(cfg.batch)
        cur = TwoLayerNet(a, W, b, net.act)
        delta = attack_batch(cur, batch.X, batch.y, cfg.attack)
        ga, gW, gb, loss = cur.grad_params(batch.X + delta, batch.y)
        if cfg.train_second:
            a = a - cfg.lr * ga
        if not cfg.freeze_first_layer:
            W = W - lr1 * gW
        if cfg.train_bias:
            b = b - cfg.lr * gb
        rec = TraceRecord(it, it * cfg.batch, loss, wall_s=time.perf_counter() - t0)
        if probe is not None and cfg.probe_every and it % cfg.probe_every == 0:
            rec.robust_test_risk, rec.std_test_risk = probe(TwoLayerNet(a, W, b, net.act))
        trace.append(rec)
    return net.copy(a=a, W=W, b=b), trace


def standard_train(net: TwoLayerNet, data: DataStream, cfg: TrainConfig,
                   probe=None) -> tuple[TwoLayerNet, TrainTrace]:
    std_cfg = TrainConfig(**{**cfg.__dict__, "attack": AttackConfig(
        **{**cfg.attack.to_dict(), "epsilon": 0.0})})
    return adversarial_train_full(net, data, std_cfg, probe)


# ---------------------------------------------------------------------------
# hyperparameters

REGIMES = ("LipschitzDFL", "LipschitzSFL", "PolyDFL", "PolySFL")


@dataclass
class HyperparamPlan:
    regime: str
    r_a: float
    r_b: float
    N_min: float
    zeta_max: float
    n_FA_min: float
    eps1: float
    eps_tilde: float
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("r_a", "r_b", "N_min", "zeta_max", "n_FA_min"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name}={v} is not positive and finite")

    def to_dict(self) -> dict:
        return asdict(self)


def theorem_hyperparams(k: int, epsilon: float, tol_eps: float, AR_star_est: float,
                        regime: str = "LipschitzDFL", constants: dict | None = None,
                        alpha: float = 1.0, beta: float = 1.0, q: int = 1,
                        zeta: float | None = None) -> HyperparamPlan:
    """Sufficient radii, width, oracle error and sample size for a target tolerance.

    Hidden polylog and constant factors are replaced by ``constants`` (keys
    ``r_a, r_b, N, zeta, n_FA``; default 1). The width bound in the
    deterministic-oracle regimes depends on the oracle error; ``zeta`` defaults to
    the computed ``zeta_max``.
    """
    if tol_eps <= 0:
        raise ValueError("tol_eps must be > 0")
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    c = {"r_a": 1.0, "r_b": 1.0, "N": 1.0, "zeta": 1.0, "n_FA": 1.0}
    c.update(constants or {})
    e1 = max(1.0, epsilon)
    et = tol_eps if AR_star_est <= 0 else min(tol_eps, tol_eps**2 / AR_star_est)
    rho = e1 / math.sqrt(et)
    if regime.startswith("Lipschitz"):
        ab = alpha if regime == "LipschitzDFL" else alpha * beta
        r_a = c["r_a"] * rho ** (k + 1 + 1 / k) / ab
        r_b = c["r_b"] * e1 * rho ** (1 + 1 / k)
        if regime == "LipschitzDFL":
            zeta_max = c["zeta"] * (et / e1**2) ** (k + 2 + 1 / k)
            z = zeta_max if zeta is None else zeta
            N_min = c["N"] * rho ** (k + 3 + 2 / k) / (alpha * z ** ((k - 1) / 2))
            n_FA = c["n_FA"] * e1**4 / (alpha**4 * tol_eps**2) * (e1**2 / et) ** (2 * k + 4 + 4 / k)
        else:
            zeta_max = c["zeta"] * beta**2 * (et / e1**2) ** (k + 2 + 1 / k)
            N_min = c["N"] / (alpha * beta**2) * (e1**2 / et) ** (k + 3 + 2 / k)
            n_FA = (c["n_FA"] * e1**4 / (alpha**4 * beta**4 * tol_eps**2)
                    * (e1**2 / et) ** (2 * k + 4 + 4 / k))
    else:
        r_a = c["r_a"]
        r_b = c["r_b"] * e1
        if regime == "PolyDFL":
            zeta_max = c["zeta"] * et / e1 ** (2 * (q + 1))
            z = zeta_max if zeta is None else zeta
            N_min = c["N"] * e1 ** (q + 1) / (alpha * z ** ((k - 1) / 2) * math.sqrt(et))
            n_FA = c["n_FA"] * e1 ** (4 * (q + 1)) / (alpha**4 * tol_eps**2)
        else:
            zeta_max = c["zeta"] * beta**2 * et / e1 ** (2 * (q + 1))
            N_min = c["N"] * e1 ** (2 * (q + 1)) / (alpha * beta**2 * et)
            n_FA = c["n_FA"] * e1 ** (4 * (q + 1)) / (alpha**4 * beta**4 * tol_eps**2)
    return HyperparamPlan(regime, r_a, r_b, N_min, zeta_max, n_FA, e1, et, c)
