import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest
from conftest import MF_LQ, normal_cloud, rel_err

from mfgflow.fbsde import (SolverConfig, SolverError, growth_and_stability_probe, solve_control_frozen, solve_mfg,
                           value, value_estimate)
from mfgflow.hamiltonian import dxH_at, v_hat
from mfgflow.measures import EmpiricalMeasure
from mfgflow.model import build_lq_model, build_nonlinear_demo
from mfgflow.riccati import solve_riccati


def test_config_validation():
    for bad in (dict(damping=0.0), dict(damping=1.5), dict(picard_tol=0.0), dict(N=0), dict(seed=None)):
        with pytest.raises(ValueError):
            SolverConfig(**bad)


def test_zero_cost_noiseless_problem():
    model = build_lq_model(Qx=0.0, Qg=0.0, sigma0=0.0)
    cfg = SolverConfig(N=5, K=10, seed=0)
    x0 = np.linspace(-1, 1, 5)[:, None]
    sol = solve_control_frozen(model, 0.0, x0, [EmpiricalMeasure(x0)] * 11, None, cfg)
    assert np.all(sol.P == 0) and np.all(sol.v == 0)
    assert np.all(sol.X == x0[None])


def _shooting(model, flow, x0, T=1.0, steps=2000):
    """Two-point boundary problem of the noiseless adjoint system by RK4 shooting."""

    def rhs(s, y):
        x, p = y[:1][None], y[1:][None]
        v = v_hat(model, s, x, flow, p)
        return np.concatenate([np.asarray(model.b(s, x, flow, v)).reshape(1),
                               -dxH_at(model, s, x, flow, v, p).reshape(1)])

    def run(p0):
        y = np.array([x0, p0])
        h = T / steps
        path = [y]
        for i in range(steps):
            s = i * h
            k1 = rhs(s, y)
            k2 = rhs(s + h / 2, y + h / 2 * k1)
            k3 = rhs(s + h / 2, y + h / 2 * k2)
            k4 = rhs(s + h, y + h * k3)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            path.append(y)
        return y[1] - model.g_x(y[:1][None], flow)[0, 0], np.array(path)

    a, b = 0.0, 2.0
    fa, fb = run(a)[0], run(b)[0]
    while abs(fb) > 1e-13:
        a, fa, b = b, fb, b - fb * (b - a) / (fb - fa)
        fb = run(b)[0]
    return run(b)[1]


def test_noiseless_demo_matches_shooting():
    model = build_nonlinear_demo(sigma0=0.0)[0]
    flow = EmpiricalMeasure([-0.5, 0.2, 1.0])
    K = 200
    ref = _shooting(model, flow, 0.8)[::2000 // K]
    # a small spread of starting points gives the regression a state to act on
    x0 = 0.8 + np.linspace(-0.1, 0.1, 21)[:, None]
    sol = solve_control_frozen(model, 0.0, x0, [flow] * (K + 1), None, SolverConfig(N=21, K=K, seed=1))
    for got, want in ((sol.X[:, 10, 0], ref[:, 0]), (sol.P[:, 10, 0], ref[:, 1])):
        assert np.max(np.abs(got - want)) <= 1e-3 * max(1.0, np.max(np.abs(want)))


def test_lq_adjoint_is_linear_feedback(pi1_base):
    for k in range(pi1_base.grid.K + 1):
        assert rel_err(pi1_base.P[k], pi1_base.X[k]) <= 1e-10
    assert rel_err(pi1_base.v, -pi1_base.X) <= 1e-10


def test_mean_field_lq_matches_riccati(mf_lq_model):
    cfg = SolverConfig(N=2000, K=50, seed=5)
    mu0 = normal_cloud(cfg.N, mean=0.6, std=0.8)
    sol = solve_mfg(mf_lq_model, 0.0, mu0, cfg)
    ric = solve_riccati(mf_lq_model, sol.grid, mean0=mu0.mean)
    for k in range(0, cfg.K + 1, 5):
        assert rel_err(sol.P[k], ric.dx_value(k, sol.X[k])) <= 0.03
    means = sol.X.mean(axis=1)
    assert rel_err(means, ric.mean_path) <= 0.03


def test_mean_field_free_model_needs_one_iteration(pi1_base):
    assert pi1_base.diagnostics["picard_iterations"] == 1
    assert pi1_base.diagnostics["fixed_point_gap"] <= pi1_base.config.picard_tol


def test_picard_gaps_decrease(mf_lq_base, demo_base):
    for sol in (mf_lq_base, demo_base):
        gaps = sol.diagnostics["gap_history"]
        assert gaps[-1] <= gaps[0]
        assert all(a >= b for a, b in zip(gaps[-3:], gaps[-2:]))


def test_decoupling_and_terminal_conditions(mf_lq_base, demo_base):
    for sol in (mf_lq_base, demo_base):
        d = sol.diagnostics
        assert d["max_first_order_residual"] <= 1e-8
        gx = sol.model.g_x(sol.X[-1], sol.measure_flow[-1])
        assert np.max(np.abs(sol.P[-1] - gx)) <= 1e-12
        assert d["cone_violations"] == 0
        assert d["adjoint_bound_violations"] == 0


def test_consistency_with_frozen_solver(demo_model, demo_base):
    fr = solve_control_frozen(demo_model, 0.0, demo_base.X[0], demo_base.measure_flow, demo_base.dB,
                              demo_base.config, warm_fields=demo_base.fields)
    for c in "XPv":
        assert np.max(np.abs(getattr(fr, c) - getattr(demo_base, c))) <= 1e-6


def test_solver_is_deterministic(mf_lq_model):
    cfg = SolverConfig(N=300, K=10, seed=9)
    a = solve_mfg(mf_lq_model, 0.0, normal_cloud(300), cfg)
    b = solve_mfg(mf_lq_model, 0.0, normal_cloud(300), cfg)
    for c in "XPQv":
        assert np.array_equal(getattr(a, c), getattr(b, c))


def test_backends_give_identical_solutions(tmp_path):
    code = (
        "import sys, numpy as np\n"
        "sys.path.insert(0, %r)\n"
        "from conftest import MF_LQ, normal_cloud\n"
        "from mfgflow.model import build_lq_model\n"
        "from mfgflow.fbsde import SolverConfig, solve_mfg\n"
        "from mfgflow import flows as F\n"
        "cfg = SolverConfig(N=200, K=8, seed=2)\n"
        "sol = solve_mfg(build_lq_model(**MF_LQ), 0.0, normal_cloud(200), cfg)\n"
        "d = F.gateaux_xi(sol, eta=np.ones((200, 1)))\n"
        "np.save(sys.argv[1], np.concatenate([sol.P.ravel(), d.P.ravel()]))\n"
    ) % os.path.dirname(__file__)
    outs = []
    for pure in ("0", "1"):
        path = tmp_path / f"out{pure}.npy"
        env = dict(os.environ, MFGFLOW_PURE=pure)
        subprocess.run([sys.executable, "-c", code, str(path)], env=env, check=True)
        outs.append(np.load(path))
    assert np.array_equal(outs[0], outs[1])


def test_picard_failure_carries_history(mf_lq_model):
    cfg = SolverConfig(N=100, K=5, seed=1, picard_max=2, picard_tol=1e-14)
    with pytest.raises(SolverError) as err:
        solve_mfg(mf_lq_model, 0.0, normal_cloud(100, mean=1.0), cfg)
    assert len(err.value.diagnostics["gap_history"]) == 2


def test_values_on_riccati_models(pi1_model):
    cfg = SolverConfig(N=1500, K=40, seed=4)
    mu0 = normal_cloud(cfg.N)
    tanh_model = build_lq_model(Qg=0.0)
    for x in (-2.0, 0.0, 1.0):
        assert value(pi1_model, 0.0, [x], mu0, cfg) == pytest.approx(0.5 * x * x + 0.5, rel=0.03)
        ref = 0.5 * np.tanh(1.0) * x * x + 0.5 * np.log(np.cosh(1.0))
        assert value(tanh_model, 0.0, [x], mu0, cfg) == pytest.approx(ref, rel=0.03)


def test_zero_cost_value_vanishes():
    model = build_lq_model(Qx=0.0, Qg=0.0)
    cfg = SolverConfig(N=200, K=10, seed=1)
    ve = value_estimate(model, 0.0, [0.7], normal_cloud(200), cfg)
    assert abs(ve.value) <= 1e-10 and abs(ve.plain) <= 1e-10


def test_value_at_horizon_is_terminal_cost(pi1_model):
    cfg = SolverConfig(N=10, K=5, seed=1)
    assert value(pi1_model, 1.0, [2.0], normal_cloud(10), cfg) == 2.0


def test_stability_probe():
    model = build_lq_model(Qv=2.0)
    cfg = SolverConfig(N=300, K=15, seed=2)
    rep = growth_and_stability_probe(model, cfg)
    assert rep["ratio_variation"] <= 0.25
    assert rep["growth_spread"] <= 3.0
    same = growth_and_stability_probe(model, cfg, sizes=(0.1,), norms=(1.0,))
    assert same["difference_ratios"][0.1] == pytest.approx(rep["difference_ratios"][0.1], rel=1e-12)


def test_csv_and_json_export(tmp_path, mf_lq_base):
    path = tmp_path / "traj.csv"
    mf_lq_base.to_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "time", "particle", "X1", "P1", "v1", "Q_fro"]
    assert len(rows) == 1 + (mf_lq_base.grid.K + 1) * mf_lq_base.N
    mf_lq_base.to_json(tmp_path / "diag.json")
    d = json.loads((tmp_path / "diag.json").read_text())
    assert d["picard_iterations"] == mf_lq_base.diagnostics["picard_iterations"]


def test_mf_lq_parameters_pass_conditions():
    from mfgflow.conditions import condition_report
    assert condition_report(build_lq_model(**MF_LQ).constants).all_pass
