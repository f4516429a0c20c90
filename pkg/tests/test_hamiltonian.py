import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgflow.conditions import check_cone_condition, in_cone
from mfgflow.hamiltonian import (MinimizerError, dpH, dxH, hamiltonian, lagrangian, minimize_lagrangian,
                                 v_hat)
from mfgflow.measures import EmpiricalMeasure
from mfgflow.model import build_lq_model, build_nonlinear_demo

M = EmpiricalMeasure([0.0, 0.5, -0.5])


@pytest.fixture(scope="module")
def plain():
    # b = v, f = v^2/2 + x^2/2, g = 0
    return build_lq_model(Qx=1.0, Qv=1.0, Qg=0.0)


@pytest.fixture(scope="module")
def demo():
    return build_nonlinear_demo()[0]


def test_lagrangian_arithmetic():
    m = build_lq_model(Qx=0.0, Qg=0.0)
    assert lagrangian(m, 0.0, [[0.0]], M, [[1.0]], [[2.0]])[0] == 2.5
    x, v = np.array([[0.3]]), np.array([[-0.7]])
    assert lagrangian(m, 0.0, x, M, v, [[0.0]])[0] == m.f(0.0, x, M, v)[0]


def test_minimizer_closed_forms(plain):
    r = minimize_lagrangian(plain, 0.0, np.array([[0.0]]), M, np.array([[2.0]]))
    assert r.converged and r.v_hat[0, 0] == pytest.approx(-2.0, abs=1e-12)
    assert hamiltonian(plain, 0.0, np.array([[0.0]]), M, np.array([[2.0]]))[0] == pytest.approx(-2.0)
    assert v_hat(plain, 0.0, np.array([[1.0]]), M, np.array([[0.0]]))[0, 0] == 0.0


def test_hamiltonian_derivatives_closed_form(plain):
    x = np.array([[0.7]])
    assert dpH(plain, 0.0, x, M, np.array([[2.0]]))[0, 0] == pytest.approx(-2.0)
    assert dxH(plain, 0.0, x, M, np.array([[2.0]]))[0, 0] == pytest.approx(0.7)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.3, 4.0), st.floats(-2.0, 2.0), st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_lq_minimizer_is_linear_feedback(qv, B, x, p):
    model = build_lq_model(Qv=qv, B=B)
    v = v_hat(model, 0.0, np.array([[x]]), M, np.array([[p]]))
    assert v[0, 0] == pytest.approx(-B * p / qv, abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
def test_envelope_derivatives(x, p):
    demo = build_nonlinear_demo()[0]
    xs, ps = np.array([[x]]), np.array([[p]])
    h = 1e-4
    fd_p = (hamiltonian(demo, 0.0, xs, M, ps + h) - hamiltonian(demo, 0.0, xs, M, ps - h)) / (2 * h)
    fd_x = (hamiltonian(demo, 0.0, xs + h, M, ps) - hamiltonian(demo, 0.0, xs - h, M, ps)) / (2 * h)
    dp = dpH(demo, 0.0, xs, M, ps)[0, 0]
    dx = dxH(demo, 0.0, xs, M, ps)[0, 0]
    assert abs(fd_p[0] - dp) <= 1e-4 * max(1.0, abs(dp))
    assert abs(fd_x[0] - dx) <= 1e-4 * max(1.0, abs(dx))


def test_demo_minimizer_matches_grid_search(demo):
    rng = np.random.default_rng(0)
    K = check_cone_condition(demo.constants)[1]
    for _ in range(5):
        x = rng.uniform(-1.5, 1.5, (1, 1))
        p = rng.uniform(-2, 2, (1, 1))
        assert in_cone(x[0], M, p[0], K)
        grid = np.arange(-5.0, 5.0 + 1e-9, 1e-3)[:, None]
        vals = lagrangian(demo, 0.0, np.repeat(x, len(grid), 0), M, grid, np.repeat(p, len(grid), 0))
        v_grid = grid[np.argmin(vals), 0]
        assert abs(v_hat(demo, 0.0, x, M, p)[0, 0] - v_grid) <= 2e-3


@settings(max_examples=20, deadline=None)
@given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
def test_first_order_and_local_minimality(x, p):
    demo = build_nonlinear_demo()[0]
    xs, ps = np.array([[x]]), np.array([[p]])
    r = minimize_lagrangian(demo, 0.0, xs, M, ps)
    assert r.converged and np.all(np.abs(r.residual) <= 1e-10)
    base = lagrangian(demo, 0.0, xs, M, r.v_hat, ps)[0]
    for d in (-1e-3, 1e-3):
        assert lagrangian(demo, 0.0, xs, M, r.v_hat + d, ps)[0] >= base - 1e-12


def test_nonconvergence_reports_last_iterate(demo):
    with pytest.raises(MinimizerError) as err:
        minimize_lagrangian(demo, 0.0, np.array([[0.3]]), M, np.array([[1.0]]), max_iter=1, tol=1e-300)
    assert err.value.v_last is not None and err.value.residual is not None
