import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import gaussian_linear_risk_mc
from robustfl.adversary import AttackConfig
from robustfl.data import MultiIndexTask, orthonormalize_rows
from robustfl.model import LinearPredictor, random_net
from robustfl.verify import (ANISOTROPIC_EPS, InequalityReport, LINF_U, counterexample_anisotropic,
                             counterexample_linf, theorem1_check, theorem1_linear_closed_form,
                             vector_angle)

ATTACK = AttackConfig(epsilon=0.5, steps=10, step_size=0.1, step_mode="normalized")


def test_vector_angle_small_and_degenerate():
    u = np.array([1.0, 0.0, 0.0])
    assert vector_angle(u, u) == 0.0
    assert vector_angle(np.array([1.0, 1e-9, 0.0]), u) == pytest.approx(1e-9, rel=1e-6)
    assert vector_angle(-u, u) == pytest.approx(math.pi)
    assert math.isnan(vector_angle(np.zeros(3), u))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_vector_angle_matches_arccos(seed):
    rng = np.random.default_rng(seed)
    w, u = rng.standard_normal((2, 4))
    c = w @ u / (np.linalg.norm(w) * np.linalg.norm(u))
    assert vector_angle(w, u) == pytest.approx(math.acos(c), abs=1e-7)


def test_inequality_report_verdict():
    assert InequalityReport(1.0, 0.1, 0.8, 0.1, 3.0).passed
    r = InequalityReport(1.0, 0.01, 0.8, 0.01, 3.0)
    assert not r.passed and r.verdict == "fail"
    assert r.to_dict()["combined_se"] == pytest.approx(math.sqrt(2) * 0.01)


@pytest.mark.parametrize("seed", range(3))
def test_projection_inequality_random_nets(seed):
    rng = np.random.default_rng(seed)
    task = MultiIndexTask.single_index(12, "tanh", seed=seed)
    f = random_net(12, 6, "tanh", rng)
    rep = theorem1_check(f, task, ATTACK, n_mc=2000, m_proj=100, seed=seed)
    assert rep.passed, rep.to_dict()
    assert rep.paired_se > 0


def test_projection_inequality_linear_predictor():
    task = MultiIndexTask.single_index(6, "identity", seed=0)
    w = task.U[0] + 0.5 * orthonormalize_rows(np.random.default_rng(1).standard_normal((1, 6)))[0]
    rep = theorem1_check(LinearPredictor(w), task, ATTACK, n_mc=4000, m_proj=50, seed=2)
    assert rep.passed and rep.lhs < rep.rhs


def test_theorem1_check_validation():
    task = MultiIndexTask.single_index(4, "tanh", seed=0)
    f = LinearPredictor(np.ones(4))
    with pytest.raises(ValueError):
        theorem1_check(f, task, AttackConfig(norm="linf"))
    with pytest.raises(ValueError):
        theorem1_check(f, task, ATTACK, n_mc=1)


@pytest.mark.parametrize("seed", range(4))
def test_linear_closed_form_strict_gap(seed):
    rng = np.random.default_rng(seed)
    d = 8
    U = orthonormalize_rows(rng.standard_normal((2, d)))
    u = rng.standard_normal(2) @ U
    perp = rng.standard_normal(d)
    perp -= U.T @ (U @ perp)
    w = U.T @ (U @ rng.standard_normal(d)) + 0.2 * perp / np.linalg.norm(perp)
    ar_h, ar_f = theorem1_linear_closed_form(w, U, u, 0.7)
    assert ar_h < ar_f
    X = rng.standard_normal((200_000, d))
    for got, ww in ((ar_h, U.T @ (U @ w)), (ar_f, w)):
        mc = gaussian_linear_risk_mc(ww, u, X, 0.7)
        assert got == pytest.approx(mc.mean(), abs=4 * mc.std() / math.sqrt(len(X)))


def test_linear_closed_form_equal_in_span():
    U = np.eye(2, 5)
    w = np.array([0.3, -1.0, 0, 0, 0])
    ar_h, ar_f = theorem1_linear_closed_form(w, U, np.eye(5)[0], 1.0)
    assert ar_h == ar_f


def test_anisotropic_counterexample():
    rep = counterexample_anisotropic()
    assert rep.confirmed and rep.angle > 0.01
    assert rep.angle == pytest.approx(0.2991518651178577, abs=1e-6)
    assert ANISOTROPIC_EPS == 1.5


def test_anisotropic_below_kink_is_parallel():
    rep = counterexample_anisotropic(epsilon=0.5)
    assert rep.angle <= 1e-6 and not rep.confirmed


def test_isotropic_control():
    u = np.array([0.6, 0.8])
    # past eps = sqrt(pi / 2) the optimum collapses to w = 0
    for eps in (0.3, 1.0, 1.2):
        assert counterexample_anisotropic(np.eye(2), u, eps).angle <= 1e-6


def test_linf_counterexample():
    rep = counterexample_linf()
    assert rep.confirmed and rep.angle > 0.001
    assert rep.shift_cosine >= 0.9
    assert np.all(np.sign(rep.w_star) == np.sign(LINF_U))


def test_linf_symmetric_control():
    u = np.ones(3) / math.sqrt(3)
    for eps in (0.1, 0.5, 0.6):
        rep = counterexample_linf(u, eps)
        assert rep.angle <= 1e-6 and not rep.confirmed


def test_isotropic_collapse_beyond_kink():
    rep = counterexample_anisotropic(np.eye(2), np.array([0.6, 0.8]), 1.3)
    assert np.all(rep.w_star == 0) and math.isnan(rep.angle) and not rep.confirmed


def test_report_json_ready():
    d = counterexample_linf(epsilon_inf=0.6).to_dict()
    assert isinstance(d["w_star"], list) and d["confirmed"] is True
