import numpy as np
import pytest

from mfgflow.model import LQParameters, TimeGrid
from mfgflow.riccati import RiccatiError, scalar_riccati_exact, solve_riccati


def test_stationary_solution():
    sol = solve_riccati(LQParameters(), TimeGrid(0.0, 1.0, 100))
    assert np.max(np.abs(sol.pi - 1.0)) <= 1e-12
    # V = x^2/2 + (T - t)/2
    assert sol.value(0, [[1.0]])[0] == pytest.approx(1.0, abs=1e-12)
    assert sol.offset[50] == pytest.approx(0.25, abs=1e-12)


def test_tanh_solution():
    g = TimeGrid(0.0, 1.0, 100)
    sol = solve_riccati(LQParameters(Qg=0.0), g)
    assert np.max(np.abs(sol.pi[:, 0, 0] - np.tanh(1.0 - g.nodes))) <= 1e-8
    assert sol.offset[0] == pytest.approx(0.5 * np.log(np.cosh(1.0)), abs=1e-8)


def test_exact_helper_agrees():
    s = np.linspace(0, 1, 11)
    assert np.allclose(scalar_riccati_exact(s, 1.0, 0.0), np.tanh(1.0 - s), atol=1e-15)
    assert np.allclose(scalar_riccati_exact(s, 1.0, 1.0), 1.0)


def test_zero_costs():
    sol = solve_riccati(LQParameters(Qx=0.0, Qg=0.0), TimeGrid(0.0, 1.0, 20))
    assert np.all(sol.pi == 0)
    assert np.all(sol.value(3, [[0.5], [-2.0]]) == 0)


def test_rk4_order():
    # terminal value 0.5 keeps the error well above roundoff
    a = np.arctanh(0.5)
    errs = []
    for K in (25, 50, 100):
        g = TimeGrid(0.0, 2.0, K)
        sol = solve_riccati(LQParameters(Qg=0.5), g)
        errs.append(np.max(np.abs(sol.pi[:, 0, 0] - np.tanh(2.0 - g.nodes + a))))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.5), (errs, orders)


@pytest.mark.parametrize("spec", [
    LQParameters(),
    LQParameters(Abar=0.3, kappa=0.5, Qx=2.0, Qv=2.0, sigma0=0.5),
    LQParameters(n=2, d=2, A=[[0.1, 0.3], [-0.2, 0.0]], Abar=[[0.2, 0.0], [0.1, 0.1]], Qx=[[1.0, 0.2], [0.2, 2.0]],
                 kappa=0.3, sigma0=[[0.4, 0.1], [0.0, 0.6]],
                 sigma1=np.array([[[0.0, 0.1], [0.0, 0.0]], [[0.0, 0.0], [0.2, 0.0]]])),
])
def test_hjb_residual(spec):
    sol = solve_riccati(spec, TimeGrid(0.0, 1.0, 40), mean0=np.full(spec.n, 0.3))
    x = np.random.default_rng(0).uniform(-2, 2, (20, spec.n))
    for k in (0, 13, 40):
        assert np.max(np.abs(sol.hjb_residual(k, x))) <= 1e-8
    assert np.allclose(sol.pi, np.swapaxes(sol.pi, 1, 2))
    assert np.all(np.linalg.eigvalsh(sol.pi) >= -1e-12)


def test_blowup_detected():
    # concave terminal cost with a long horizon drives pi to -infinity
    with pytest.raises(RiccatiError):
        solve_riccati(LQParameters(Qx=0.0, Qg=-3.0), TimeGrid(0.0, 5.0, 50))
