import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgflow.measures import EmpiricalMeasure
from mfgflow.model import (AssumptionConstants, LQParameters, ModelError, TimeGrid, audit_constants,
                           build_lq_model, build_nonlinear_demo, check_derivatives, check_measure_derivatives,
                           check_sigma_affine, convexity_probe, generate_paths, model_from_spec)


def test_time_grid():
    g = TimeGrid(0.25, 1.0, 3)
    assert g.nodes[0] == 0.25 and g.nodes[-1] == 1.0 and g.dt == 0.25
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 4)


def test_paths_deterministic_and_stream_stable():
    g = TimeGrid(0.0, 1.0, 5)
    a = generate_paths(g, 10, 7).increments
    b = generate_paths(g, 10, 7).increments
    c = generate_paths(g, 25, 7).increments
    assert np.array_equal(a, b)
    assert np.array_equal(a, c[:10])
    assert not np.array_equal(a, generate_paths(g, 10, 8).increments)
    assert not np.array_equal(a, generate_paths(g, 10, 7, stream=1).increments)


def test_paths_moments():
    g = TimeGrid(0.0, 1.0, 1)
    N = 100_000
    inc = generate_paths(g, N, 1).increments[:, 0, 0]
    assert abs(inc.mean()) <= 4 * np.sqrt(g.dt / N)
    assert abs(inc.var() / g.dt - 1) <= 0.03


def test_paths_need_seed():
    with pytest.raises(ValueError):
        generate_paths(TimeGrid(0.0, 1.0, 2), 3, None)


@pytest.mark.parametrize("builder", [
    lambda: build_lq_model(),
    lambda: build_lq_model(n=2, d=2, A=[[0.1, 0.2], [0.0, -0.3]], Abar=0.1, Qx=[[2.0, 0.3], [0.3, 1.0]],
                           kappa=0.4, sigma0=[[0.5, 0.1], [0.0, 0.4]], sigma1=0.0),
    lambda: build_nonlinear_demo()[0],
    lambda: build_nonlinear_demo(n=2, d=2, sigma0=[[0.5, 0.0], [0.1, 0.5]])[0],
])
def test_analytic_derivatives_match_finite_differences(builder):
    model = builder()
    errs = check_derivatives(model, np.random.default_rng(5))
    assert max(errs.values()) <= 1e-5, errs
    merrs = check_measure_derivatives(model, np.random.default_rng(6))
    assert max(merrs.values()) <= 1e-5, merrs


def test_sigma_affine_with_state_dependence():
    s1 = np.zeros((2, 2, 2))
    s1[0, 0, 1] = 0.2
    s1[1, 1, 0] = -0.1
    model = build_lq_model(n=2, d=2, sigma0=[[0.5, 0.0], [0.0, 0.5]], sigma1=s1)
    assert check_sigma_affine(model, np.random.default_rng(0)) <= 1e-12


def test_lq_control_derivative_is_B():
    model = build_lq_model(B=1.7)
    rng = np.random.default_rng(2)
    m = EmpiricalMeasure(rng.standard_normal(5))
    x, v = rng.standard_normal((10, 1)), rng.standard_normal((10, 1))
    assert np.all(np.broadcast_to(model.b_v(0.0, x, m, v), (10, 1, 1)) == 1.7)


def test_lq_drift_curvature_vanishes():
    model = build_lq_model(Abar=0.3)
    c = model.constants
    assert c.L_b0 == c.L_b1 == c.L_b2 == 0.0
    rng = np.random.default_rng(3)
    m = EmpiricalMeasure(rng.standard_normal(6))
    x, v = rng.standard_normal((8, 1)), rng.standard_normal((8, 1))
    for name in ("b_xx", "b_xv", "b_vv"):
        assert np.all(np.asarray(getattr(model, name)(0.0, x, m, v)) == 0)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(0.2, 3.0), st.floats(0.0, 3.0))
def test_lq_convexity_constants(qv, qx, qg):
    model = build_lq_model(Qv=qv, Qx=qx, Qg=qg)
    c = model.constants
    assert c.lambda_v == pytest.approx(qv / 2) and c.lambda_x == pytest.approx(qx / 2)
    assert c.lambda_g == pytest.approx(qg / 2)
    obs = convexity_probe(model, np.random.default_rng(0))
    # ratios of exact quadratics, up to cancellation in small steps
    assert obs["lambda_v"] >= c.lambda_v * (1 - 1e-6)
    assert obs["lambda_x"] >= c.lambda_x * (1 - 1e-6)
    assert obs["lambda_g"] >= c.lambda_g * (1 - 1e-6) - 1e-9


def test_lq_rejects_indefinite_control_cost():
    with pytest.raises(ModelError):
        build_lq_model(Qv=-1.0)


def test_zero_nonlinearity_demo_equals_lq():
    params = dict(Abar=0.05, Qx=2.0, Qv=2.0, kappa=0.1, sigma0=0.5)
    demo = build_nonlinear_demo(alpha=0.0, gamma=0.0, rho=0.0, theta=0.0, **params)[0]
    lq = build_lq_model(**params)
    rng = np.random.default_rng(4)
    m = EmpiricalMeasure(rng.standard_normal(9))
    x, v = rng.uniform(-3, 3, (20, 1)), rng.uniform(-3, 3, (20, 1))
    for name in ("b", "f", "f_x", "f_v", "b_x"):
        assert np.array_equal(getattr(demo, name)(0.0, x, m, v), getattr(lq, name)(0.0, x, m, v))
    assert np.array_equal(demo.g(x, m), lq.g(x, m))


def test_demo_declared_curvature_bounds_hold():
    model, c = build_nonlinear_demo()
    obs = audit_constants(model, c, np.random.default_rng(11), probes=800)
    assert obs["L_b0"] <= c.L_b0
    assert obs["l_b_m"] <= c.l_b_m + 1e-12


def test_demo_rejects_understated_constants():
    model, c = build_nonlinear_demo()
    bad = AssumptionConstants(**{**c.to_dict(), "L_b0": c.L_b0 / 100})
    with pytest.raises(ModelError):
        build_nonlinear_demo(constants=bad)


def test_constants_validated():
    with pytest.raises(ModelError):
        AssumptionConstants(L=1.0, lambda_b=1.0, lambda_v=1.0, lambda_x=0.0, lambda_g=0.0, L_g=2.0)
    with pytest.raises(ModelError):
        AssumptionConstants(L=-1.0, lambda_b=1.0, lambda_v=1.0, lambda_x=0.0, lambda_g=0.0)


def test_model_from_spec():
    m = model_from_spec({"family": "lq", "params": {"Qv": 2.0}})
    assert m.constants.lambda_v == 1.0
    assert model_from_spec({"family": "nonlinear_demo"}).name == "nonlinear_demo"
    with pytest.raises(ModelError):
        model_from_spec({"family": "heston"})
    with pytest.raises(TypeError):
        model_from_spec({"family": "lq", "params": {"bogus": 1}})


def test_fewer_controls_than_states_gives_zero_lambda_b():
    model = build_lq_model(LQParameters(n=2, d=1, B=[[1.0], [0.0]], sigma1=np.zeros((2, 2, 2))))
    assert model.constants.lambda_b == 0.0
