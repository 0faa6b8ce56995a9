"""Statistical checks of the projection inequality and of the linear counterexamples."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from robustfl.adversary import (AttackConfig, attacked_losses, linear_adv_risk_l2,
                                optimal_linear_robust_weight, optimal_linear_robust_weight_linf)
from robustfl.approx import ConditionalProjection
from robustfl.data import MultiIndexTask, gen_dataset
from robustfl.rng import stream


def vector_angle(w: np.ndarray, u: np.ndarray) -> float:
    """Angle between two vectors, accurate near 0 (atan2 of the sine and cosine parts)."""
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    nw, nu = np.linalg.norm(w), np.linalg.norm(u)
    if nw == 0 or nu == 0:
        return float("nan")
    uh = u / nu
    c = float(w @ uh)
    s = float(np.linalg.norm(w - c * uh))
    return math.atan2(s, c)


@dataclass
class InequalityReport:
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    slack: float
    paired_se: float = float("nan")
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.lhs <= self.rhs + self.slack * self.combined_se)

    @property
    def combined_se(self) -> float:
        return math.sqrt(self.lhs_se**2 + self.rhs_se**2)

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "lhs_se": self.lhs_se, "rhs": self.rhs, "rhs_se": self.rhs_se,
                "slack": self.slack, "combined_se": self.combined_se,
                "paired_se": self.paired_se, "verdict": self.verdict}


def theorem1_check(f, task: MultiIndexTask, attack: AttackConfig, n_mc: int = 10_000,
                   m_proj: int = 200, slack: float = 3.0, seed: int = 0) -> InequalityReport:
    """Compare the adversarial risk of ``x -> E[f(x) | Ux]`` with that of ``f``.

    Both risks are estimated on the same test sample.
    """
    if attack.norm != "l2":
        raise ValueError("the projection inequality is stated for l2 attacks")
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    h = ConditionalProjection(f, task.U, m_proj, seed)
    data = gen_dataset(task, n_mc, seed)
    rng = (lambda: stream(seed, "attack-init")) if attack.init == "randomball" else (lambda: None)
    lh = attacked_losses(h, data.X, data.y, attack, "pgd", rng())
    lf = attacked_losses(f, data.X, data.y, attack, "auto", rng())
    root_n = math.sqrt(n_mc)
    return InequalityReport(float(lh.mean()), float(lh.std(ddof=1) / root_n),
                            float(lf.mean()), float(lf.std(ddof=1) / root_n), slack,
                            float((lh - lf).std(ddof=1) / root_n))


def theorem1_linear_closed_form(w: np.ndarray, U: np.ndarray, u: np.ndarray,
                                epsilon: float) -> tuple[float, float]:
    """Exact ``(AR(h(U .)), AR(f))`` for ``f = <w, .>`` when ``y = <u, x>`` with ``u`` in span(U).

    The projection of a linear predictor is linear with weight ``U^T U w``.
    """
    w = np.asarray(w, dtype=np.float64)
    U = np.atleast_2d(U)
    I = np.eye(len(w))
    return (linear_adv_risk_l2(U.T @ (U @ w), u, I, epsilon),
            linear_adv_risk_l2(w, u, I, epsilon))


@dataclass
class CounterexampleReport:
    w_star: np.ndarray
    angle: float
    threshold: float
    confirmed: bool
    shift_cosine: float = float("nan")

    def to_dict(self) -> dict:
        return {"w_star": self.w_star.tolist(), "angle": self.angle, "threshold": self.threshold,
                "confirmed": self.confirmed, "shift_cosine": self.shift_cosine}


ANISOTROPIC_SIGMA = np.diag([4.0, 1.0])
ANISOTROPIC_U = np.array([1.0, 1.0]) / math.sqrt(2.0)
# w = u stays optimal while eps ||Sigma^{-1/2} u|| <= sqrt(2/pi), i.e. eps <= 1.009 here
ANISOTROPIC_EPS = 1.5
LINF_U = np.array([0.8, 0.5, 0.33]) / np.linalg.norm([0.8, 0.5, 0.33])
# w = u stays optimal while eps sqrt(d) <= sqrt(2/pi), i.e. eps <= 0.461 for d = 3
LINF_EPS = 0.5


def counterexample_anisotropic(Sigma=ANISOTROPIC_SIGMA, u=ANISOTROPIC_U,
                               epsilon: float = ANISOTROPIC_EPS,
                               threshold: float = 0.01, max_iter: int = 200_000
                               ) -> CounterexampleReport:
    """Robust linear weight under ``x ~ N(0, Sigma)``; confirmed iff it is not parallel to ``u``."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    w = optimal_linear_robust_weight(u, Sigma, epsilon, max_iter=max_iter)
    ang = vector_angle(w, u)
    return CounterexampleReport(w, ang, threshold, bool(ang > threshold))


def counterexample_linf(u=LINF_U, epsilon_inf: float = LINF_EPS, threshold: float = 0.001,
                        max_iter: int = 200_000) -> CounterexampleReport:
    """Robust linear weight under an l-infinity attack.

    Confirmed iff ``w*`` is rotated away from ``u`` by more than ``threshold``
    and the shift ``w* - u`` points along ``-sign(u)`` (cosine >= 0.9).
    """
    u = np.asarray(u, dtype=np.float64)
    w = optimal_linear_robust_weight_linf(u, epsilon_inf, max_iter=max_iter)
    ang = vector_angle(w, u)
    shift = w - u
    s = -np.sign(u)
    ns = np.linalg.norm(shift)
    cos = float(shift @ s / (ns * np.linalg.norm(s))) if ns > 0 else float("nan")
    return CounterexampleReport(w, ang, threshold, bool(ang > threshold and cos >= 0.9), cos)
