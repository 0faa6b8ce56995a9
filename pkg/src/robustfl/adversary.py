"""Worst-case input perturbations and adversarial risk.

Two kinds of inner maximization live here. :func:`pgd_attack` is a batched
projected gradient ascent for any predictor exposing ``forward`` and
``grad_input``. For linear predictors the maximizer is known in closed form
(:func:`exact_linear_attack`), and under Gaussian inputs so is the whole risk
(:func:`linear_adv_risk_l2`, :func:`linear_adv_risk_linf`).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from robustfl.data import Dataset, MultiIndexTask, gen_dataset
from robustfl.model import LinearPredictor, TwoLayerNet
from robustfl.rng import stream

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
NORMS = ("l2", "linf")


class ConvergenceError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    epsilon: float = 1.0
    norm: str = "l2"
    steps: int = 5
    step_size: float = 0.1
    step_mode: str = "signed"
    keep_best: bool = True
    init: str = "zero"

    def __post_init__(self):
        self.norm = self.norm.lower()
        self.step_mode = self.step_mode.lower()
        self.init = self.init.lower().replace("_", "")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.step_mode not in ("signed", "normalized"):
            raise ValueError("step_mode must be 'signed' or 'normalized'")
        if self.init not in ("zero", "randomball"):
            raise ValueError("init must be 'zero' or 'randomball'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, spec: dict) -> AttackConfig:
        return cls(**spec)


@dataclass
class RiskEstimate:
    value: float
    std_err: float
    n: int
    attack: AttackConfig

    def to_dict(self) -> dict:
        return {"value": self.value, "std_err": self.std_err, "n": self.n,
                "attack": self.attack.to_dict()}


def project(delta: np.ndarray, epsilon: float, norm: str) -> np.ndarray:
    """Project each row of ``delta`` onto the ``norm`` ball of radius ``epsilon``."""
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    nrm = np.linalg.norm(delta, axis=-1, keepdims=True)
    scale = np.where(nrm > epsilon, epsilon / np.maximum(nrm, 1e-300), 1.0)
    return delta * scale


def _random_ball(rng: np.random.Generator, n: int, d: int, eps: float, norm: str) -> np.ndarray:
    if norm == "linf":
        return rng.uniform(-eps, eps, size=(n, d))
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * eps * rng.uniform(size=(n, 1)) ** (1.0 / d)


def pgd_attack(net, X: np.ndarray, y: np.ndarray, cfg: AttackConfig,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Batched PGD on the squared loss ``(f(x + delta) - y)^2``.

    Returns ``delta`` with the same shape as ``X``. With ``keep_best`` the
    returned perturbation is the best visited iterate, ``delta = 0`` included.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    n, d = X.shape
    eps = cfg.epsilon
    if cfg.init == "randomball" and eps > 0:
        if rng is None:
            raise ValueError("random-ball init needs an rng")
        delta = _random_ball(rng, n, d, eps, cfg.norm)
    else:
        delta = np.zeros_like(X)
    delta = project(delta, eps, cfg.norm)
    if eps == 0:
        return delta[0] if single else delta

    if cfg.keep_best:
        best = np.zeros_like(X)
        best_loss = (net.forward(X) - y) ** 2
        loss = (net.forward(X + delta) - y) ** 2
        better = loss > best_loss
        best[better], best_loss[better] = delta[better], loss[better]

    for _ in range(cfg.steps):
        Xa = X + delta
        r = net.forward(Xa) - y
        g = 2.0 * r[:, None] * net.grad_input(Xa)
        if cfg.step_mode == "signed" or cfg.norm == "linf":
            step = np.sign(g)
        else:
            gn = np.linalg.norm(g, axis=1, keepdims=True)
            step = np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
        delta = project(delta + cfg.step_size * step, eps, cfg.norm)
        if cfg.keep_best:
            loss = (net.forward(X + delta) - y) ** 2
            better = loss > best_loss
            best[better], best_loss[better] = delta[better], loss[better]

    out = best if cfg.keep_best else delta
    return out[0] if single else out


def exact_linear_attack(w: np.ndarray, X: np.ndarray, y, epsilon: float,
                        norm: str = "l2") -> np.ndarray:
    """Maximizer of ``(<w, x + delta> - y)^2`` over the ball; zero residual takes the + sign."""
    w = np.asarray(w, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    r = X @ w - y
    sgn = np.where(np.asarray(r) >= 0, 1.0, -1.0)
    if norm == "l2":
        nw = np.linalg.norm(w)
        direction = w / nw if nw > 0 else np.zeros_like(w)
    elif norm == "linf":
        direction = np.sign(w)
    else:
        raise ValueError(f"norm must be one of {NORMS}")
    return epsilon * np.multiply.outer(sgn, direction)


def _check_psd(Sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Sigma = np.asarray(Sigma, dtype=np.float64)
    if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
        raise ValueError("Sigma must be square")
    scale = max(1.0, float(np.max(np.abs(Sigma))))
    if np.max(np.abs(Sigma - Sigma.T)) > 1e-12 * scale:
        raise ValueError("Sigma is not symmetric")
    evals, evecs = np.linalg.eigh(Sigma)
    if evals[0] < -1e-12 * scale:
        raise ValueError(f"Sigma is not PSD (min eigenvalue {evals[0]:.3e})")
    return np.maximum(evals, 0.0), evecs


def sqrtm_psd(Sigma: np.ndarray) -> np.ndarray:
    evals, evecs = _check_psd(Sigma)
    return (evecs * np.sqrt(evals)) @ evecs.T


def linear_adv_risk_l2(w, u, Sigma, epsilon: float) -> float:
    """Exact l2 adversarial risk of ``x -> <w, x>`` when ``y = <u, x>`` and ``x ~ N(0, Sigma)``.

    The residual ``<w - u, x>`` is ``N(0, s^2)`` with ``s = ||Sigma^{1/2}(w - u)||``,
    and the attack adds ``eps ||w||`` to its magnitude, so the risk is
    ``E(|r| + eps ||w||)^2 = s^2 + eps^2 ||w||^2 + 2 eps sqrt(2/pi) s ||w||``.
    """
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    Sigma = np.eye(len(w)) if Sigma is None else Sigma
    _check_psd(Sigma)
    v = w - u
    s = math.sqrt(max(float(v @ Sigma @ v), 0.0))
    nw = float(np.linalg.norm(w))
    return s * s + epsilon**2 * nw * nw + 2.0 * epsilon * SQRT_2_OVER_PI * s * nw


def linear_adv_risk_linf(w, u, epsilon_inf: float) -> float:
    """Exact l-infinity adversarial risk under ``x ~ N(0, I)``; the attack adds ``eps ||w||_1``."""
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    s = float(np.linalg.norm(w - u))
    t = float(np.sum(np.abs(w)))
    return s * s + epsilon_inf**2 * t * t + 2.0 * epsilon_inf * SQRT_2_OVER_PI * s * t


def _in_scaled_ball(A: np.ndarray, v: np.ndarray) -> bool:
    """Whether ``v = A g`` for some ``||g|| <= 1`` (A symmetric PSD)."""
    g, *_ = np.linalg.lstsq(A, v, rcond=None)
    ok_range = np.linalg.norm(A @ g - v) <= 1e-10 * max(1.0, np.linalg.norm(v))
    return bool(ok_range and np.linalg.norm(g) <= 1.0 + 1e-12)


def _armijo_descent(fun, grad, w0, proj=None, tol=1e-10, max_iter=200_000):
    """Projected gradient descent with backtracking, then Newton polishing.

    Function values stop resolving progress once the gradient is around 1e-8,
    so the last digits come from Newton steps on the free coordinates with a
    finite-difference Hessian of the analytic gradient.
    """
    proj = proj or (lambda z: z)
    w = proj(np.asarray(w0, dtype=np.float64))
    fw = fun(w)
    step = 1.0

    def pgrad(z):
        return z - proj(z - grad(z))

    for it in range(max_iter):
        g = grad(w)
        pg = w - proj(w - g)
        if np.linalg.norm(pg) <= max(tol, 1e-7):
            break
        step = min(step * 2.0, 1e3)
        while True:
            cand = proj(w - step * g)
            fc = fun(cand)
            if fc <= fw - 1e-4 * float(g @ (w - cand)) or step < 1e-20:
                break
            step *= 0.5
        if step < 1e-20:
            break
        w, fw = cand, fc
    else:
        raise ConvergenceError(f"no convergence in {max_iter} iterations; "
                               f"|proj grad|={np.linalg.norm(pgrad(w)):.3e}, f={fw:.6e}")

    for _ in range(50):
        pg = pgrad(w)
        if np.linalg.norm(pg) <= tol:
            return w, it
        g = grad(w)
        free = np.abs(pg - g) < 1e-15 * max(1.0, np.linalg.norm(g))
        if not np.any(free):
            break
        h = 1e-6
        idx = np.flatnonzero(free)
        H = np.empty((len(idx), len(idx)))
        for col, i in enumerate(idx):
            e = np.zeros_like(w)
            e[i] = h
            H[:, col] = (grad(w + e)[idx] - grad(w - e)[idx]) / (2 * h)
        H = 0.5 * (H + H.T)
        step_vec = np.zeros_like(w)
        step_vec[idx] = np.linalg.solve(H, g[idx])
        w = proj(w - step_vec)
    raise ConvergenceError(f"gradient norm stalled at {np.linalg.norm(pgrad(w)):.3e} "
                           f"(tol {tol:.1e}); w={w}")


def optimal_linear_robust_weight(u, Sigma, epsilon: float, max_iter: int = 200_000) -> np.ndarray:
    """Minimizer of :func:`linear_adv_risk_l2` over ``w``.

    The objective is non-smooth at ``w = u`` and ``w = 0``; both are tested for
    subgradient optimality first. Otherwise descent starts from
    ``(Sigma + eps I)^{-1} Sigma u`` and runs until the gradient norm is at most 1e-10.
    """
    u = np.asarray(u, dtype=np.float64)
    Sigma = np.asarray(Sigma, dtype=np.float64)
    root = sqrtm_psd(Sigma)
    if epsilon == 0 or not np.any(u):
        return u.copy()
    c = SQRT_2_OVER_PI
    nu = np.linalg.norm(u)
    # 0 in the subdifferential at w = u: 2 eps^2 u + 2 eps c ||u|| Sigma^{1/2} g = 0
    if _in_scaled_ball(root, -epsilon * u / (c * nu)):
        return u.copy()
    # ... and at w = 0: -2 Sigma u + 2 eps c s0 g = 0
    s0 = math.sqrt(max(float(u @ Sigma @ u), 0.0))
    if np.linalg.norm(Sigma @ u) <= epsilon * c * s0:
        return np.zeros_like(u)

    def fun(w):
        return linear_adv_risk_l2(w, u, Sigma, epsilon)

    def grad(w):
        v = w - u
        Sv = Sigma @ v
        s = math.sqrt(max(float(v @ Sv), 1e-300))
        nw = max(np.linalg.norm(w), 1e-300)
        return 2 * Sv + 2 * epsilon**2 * w + 2 * epsilon * c * (nw * Sv / s + s * w / nw)

    w0 = np.linalg.solve(Sigma + epsilon * np.eye(len(u)), Sigma @ u)
    w, _ = _armijo_descent(fun, grad, w0, max_iter=max_iter)
    return w


def optimal_linear_robust_weight_linf(u, epsilon_inf: float, max_iter: int = 200_000) -> np.ndarray:
    """Minimizer of :func:`linear_adv_risk_linf`.

    A minimizer never has a coordinate of opposite sign to ``u`` (zeroing it
    lowers both terms), so the search is projected descent on that closed
    orthant, where ``||w||_1`` is linear.
    """
    u = np.asarray(u, dtype=np.float64)
    if epsilon_inf == 0 or not np.any(u):
        return u.copy()
    c = SQRT_2_OVER_PI
    sig = np.sign(u)
    # subdifferential at w = u is 2 eps ||u||_1 (eps sigma + c g), ||g|| <= 1
    if epsilon_inf * np.linalg.norm(sig) <= c:
        return u.copy()

    def proj(w):
        return np.where(sig > 0, np.maximum(w, 0.0), np.where(sig < 0, np.minimum(w, 0.0), 0.0))

    def fun(w):
        return linear_adv_risk_linf(w, u, epsilon_inf)

    def grad(w):
        v = w - u
        s = max(np.linalg.norm(v), 1e-300)
        t = float(sig @ w)
        return 2 * v + 2 * epsilon_inf**2 * t * sig + 2 * epsilon_inf * c * (t * v / s + s * sig)

    w, _ = _armijo_descent(fun, grad, 0.9 * u, proj=proj, max_iter=max_iter)
    return w


def attacked_losses(predictor, X: np.ndarray, y: np.ndarray, cfg: AttackConfig,
                    method: str = "auto", rng: np.random.Generator | None = None,
                    chunk: int = 4096) -> np.ndarray:
    """Per-sample attacked squared losses."""
    if method == "auto":
        method = "exact" if isinstance(predictor, LinearPredictor) else "pgd"
    out = np.empty(len(y))
    for lo in range(0, len(y), chunk):
        Xc, yc = X[lo:lo + chunk], y[lo:lo + chunk]
        if method == "exact":
            if not isinstance(predictor, LinearPredictor):
                raise ValueError("exact attack needs a LinearPredictor")
            delta = exact_linear_attack(predictor.w, Xc, yc, cfg.epsilon, cfg.norm)
        else:
            delta = pgd_attack(predictor, Xc, yc, cfg, rng)
        out[lo:lo + chunk] = (predictor.forward(Xc + delta) - yc) ** 2
    return out


def estimate_adv_risk(predictor: TwoLayerNet | LinearPredictor, task: MultiIndexTask | None,
                      cfg: AttackConfig, n: int = 10_000, seed: int = 0,
                      data: Dataset | None = None, method: str = "auto") -> RiskEstimate:
    """Monte-Carlo adversarial risk on a fresh test set (or on ``data`` when given)."""
    if data is None:
        if n < 1:
            raise ValueError("n must be >= 1")
        data = gen_dataset(task, n, seed)
    rng = stream(seed, "attack-init") if cfg.init == "randomball" else None
    losses = attacked_losses(predictor, data.X, data.y, cfg, method, rng)
    m = len(losses)
    se = float(np.std(losses, ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    return RiskEstimate(float(np.mean(losses)), se, m, cfg)
