"""Acceptance criteria at their stated scale and tolerances.

Each test records one PASS/FAIL line, printed in the terminal summary.
"""
import filecmp
import json
import math
import os
import time

import numpy as np
import pytest

from mfgflow import cli
from mfgflow import flows as F
from mfgflow import master as M
from mfgflow.conditions import check_cone_condition, check_property_S
from mfgflow.fbsde import SolverConfig, solve_control_frozen, solve_mfg, value, value_estimate
from mfgflow.measures import EmpiricalMeasure, lex_order
from mfgflow.model import AssumptionConstants, TimeGrid, build_lq_model, build_nonlinear_demo, generate_paths
from mfgflow.riccati import solve_riccati

from conftest import MF_LQ, normal_cloud, rel_err

pytestmark = pytest.mark.slow

RESULTS = []

BIG = SolverConfig(N=5000, K=100, seed=3)
MID = SolverConfig(N=2000, K=50, seed=3)


def record(number, title, passed, detail):
    RESULTS.append((number, title, bool(passed), detail))
    return passed


def _max_node_rel(a, b):
    return max(rel_err(a[k], b[k]) for k in range(a.shape[0]))


@pytest.fixture(scope="module")
def mu_big():
    return normal_cloud(BIG.N)


@pytest.fixture(scope="module")
def solves(mu_big):
    """Equilibria at N=5000, K=100 with their wall times."""
    models = {
        "pi1": build_lq_model(),
        "tanh": build_lq_model(Qg=0.0),
        "mf_lq": build_lq_model(**MF_LQ),
        "lq_qv2": build_lq_model(Qv=2.0),
        "demo": build_nonlinear_demo()[0],
    }
    out = {}
    for name, model in models.items():
        t0 = time.perf_counter()
        sol = solve_mfg(model, 0.0, mu_big, BIG)
        out[name] = (model, sol, time.perf_counter() - t0)
    return out


# --------------------------------------------------------------------------


def test_c01_property_S_linear_reduction():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        lg, lx, lv, lb = rng.uniform(0.05, 3.0, 4)
        Lg, Lf0, Lf1 = rng.uniform(0.0, 1.0, 3)
        c = AssumptionConstants(L=1.0, lambda_b=lb, lambda_v=lv, lambda_x=lx, lambda_g=lg,
                                L_g=Lg, L_f0=Lf0, L_f1=Lf1)
        rows = check_property_S(c)
        ref = [2 * lg - Lg, 2 * lx - Lf0]
        if ref[1] > 0:
            ref.append(2 * lv - Lf1 / (2 * math.sqrt(ref[1])))
        worst = max(worst, max(abs(r.margin - m) for r, m in zip(rows, ref)))
    assert record(1, "Property (S) linear reduction", worst <= 1e-12, f"max margin gap {worst:.1e}")


def test_c02_cone_constant():
    row, K = check_cone_condition(AssumptionConstants(L=1.0, lambda_b=1.0, lambda_v=1.0, L_b2=0.0,
                                                      lambda_x=1.0, lambda_g=1.0))
    undefined = [check_cone_condition(AssumptionConstants(L=1.0, lambda_b=lb, lambda_v=lv, lambda_x=1.0,
                                                          lambda_g=1.0))[1] is None
                 for lb, lv in ((1.0, 0.5), (0.5, 0.5), (0.25, 1.0))]
    ok = K == 3.0 and row.passed and all(undefined)
    assert record(2, "Cone constant", ok, f"K = {K!r}; undefined on boundary/inside: {all(undefined)}")


def _riccati_checks(model, sol, mu0, vref):
    ric = solve_riccati(model, sol.grid, mean0=mu0.mean)
    ref_P = np.stack([ric.dx_value(k, sol.X[k]) for k in range(sol.grid.K + 1)])
    errs = {"P": _max_node_rel(sol.P, ref_P)}
    for x in (-2.0, 0.0, 1.0):
        ve = value_estimate(model, 0.0, [x], mu0, BIG, mfg=sol)
        g, h = M.dx_value(ve.frozen)
        errs[f"V({x:g})"] = abs(ve.value - vref(x)) / abs(vref(x))
        errs[f"DxV({x:g})"] = rel_err(g, ric.dx_value(0, np.array([[x]]))[0])
        errs[f"DxxV({x:g})"] = rel_err(h, ric.dxx_value(0))
    return errs


def test_c03_riccati_pi1(solves, mu_big):
    model, sol, t_solve = solves["pi1"]
    t0 = time.perf_counter()
    errs = _riccati_checks(model, sol, mu_big, lambda x: 0.5 * x * x + 0.5)
    elapsed = t_solve + time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 0.03 and elapsed <= 60
    assert record(3, "LQ Riccati equivalence (pi = 1)", ok, f"max rel err {worst:.2e}, {elapsed:.1f} s")


def test_c04_riccati_tanh(solves, mu_big):
    model, sol, _ = solves["tanh"]
    errs = _riccati_checks(model, sol, mu_big,
                           lambda x: 0.5 * math.tanh(1.0) * x * x + 0.5 * math.log(math.cosh(1.0)))
    worst = max(v for k, v in errs.items() if k.startswith("V("))
    assert record(4, "Analytic Riccati model pi = tanh(T - s)", worst <= 0.03, f"max value rel err {worst:.2e}")


def test_c05_first_order_residual(solves):
    res = {name: solves[name][1].diagnostics["max_first_order_residual"] for name in ("pi1", "tanh", "demo")}
    ok = res["pi1"] <= 1e-8 and res["tanh"] <= 1e-8 and res["demo"] <= 1e-6
    detail = ", ".join(f"{k} {v:.1e}" for k, v in res.items())
    assert record(5, "First-order condition residual", ok, detail)


def test_c06_cone_invariant(solves):
    counts = {}
    for name in ("mf_lq", "lq_qv2", "demo"):
        d = solves[name][1].diagnostics
        assert d["cone_K"] is not None
        counts[name] = d["cone_violations"]
    ok = all(v == 0 for v in counts.values())
    assert record(6, "Cone invariant", ok, ", ".join(f"{k} {v} violations" for k, v in counts.items()))


@pytest.fixture(scope="module")
def mf_lq_mid():
    model = build_lq_model(**MF_LQ)
    cfg = SolverConfig(N=2000, K=50, seed=3, picard_tol=1e-12)
    xi = normal_cloud(cfg.N).particles[:, 0]
    return model, cfg, xi, solve_mfg(model, 0.0, EmpiricalMeasure(xi), cfg)


def _gateaux_fd_errors(mf_lq_mid):
    model, cfg, xi, base = mf_lq_mid
    eta = np.sin(2 * xi) + 0.3 * xi ** 2
    D = F.gateaux_xi(base, eta=eta, tol=1e-13)
    errs = []
    for eps in (1e-1, 1e-2, 1e-3):
        o = solve_mfg(model, 0.0, EmpiricalMeasure(xi + eps * eta), cfg, paths=base.dB)
        errs.append(max(np.max(np.abs((getattr(o, c) - getattr(base, c)) / eps - getattr(D, c)[..., 0]))
                        for c in "XPv"))
    return errs


@pytest.mark.xfail(strict=True, reason="the scheme is exactly affine in the initial law on LQ models; "
                                        "difference quotients sit at the roundoff floor and cannot decrease")
def test_c07_gateaux_convergence(mf_lq_mid):
    errs = _gateaux_fd_errors(mf_lq_mid)
    ok = errs[0] > errs[1] > errs[2]
    record(7, "Gateaux convergence (monotone decrease)", ok,
           "errors " + ", ".join(f"{e:.1e}" for e in errs) + " (expected failure, roundoff floor)")
    assert ok


def test_c07_gateaux_roundoff_floor(mf_lq_mid):
    errs = _gateaux_fd_errors(mf_lq_mid)
    assert max(errs) <= 1e-9


def test_c08_decomposition(mf_lq_mid):
    _, _, xi, base = mf_lq_mid
    eta = np.sin(2 * xi) + 0.3 * xi ** 2
    r_lq = F.decompose_gateaux(base, eta=eta).residual
    demo = build_nonlinear_demo()[0]
    dbase = solve_mfg(demo, 0.0, EmpiricalMeasure(xi), MID)
    r_demo = F.decompose_gateaux(dbase, eta=eta).residual
    ok = r_lq <= 1e-8 and r_demo <= 1e-3
    assert record(8, "Decomposition identity", ok, f"LQ {r_lq:.1e}, demo {r_demo:.1e}")


def test_c09_lifting(mf_lq_mid, mu_big):
    model, cfg, xi, base = mf_lq_mid
    eta = np.sin(2 * xi) + 0.3 * xi ** 2
    xsol = value_estimate(model, 0.0, [0.5], EmpiricalMeasure(xi), cfg, mfg=base).frozen
    kf = F.kernel_flows(base, ygrid=32, x_solution=xsol)
    out = F.lifting_check(base, eta, kf, x_solution=xsol)
    ok = out["xi"] <= 0.02 and out["mu"] <= 0.02
    assert record(9, "Lifting identities (32 y-nodes)", ok, f"xi {out['xi']:.2e}, mu {out['mu']:.2e}")


def test_c10_measure_derivative():
    model = build_lq_model(**MF_LQ)
    cfg = SolverConfig(N=4000, K=50, seed=1)
    xi = 0.8 + generate_paths(TimeGrid(0.0, 1.0, 1), cfg.N, 99).increments[:, 0]
    x = np.array([1.0])
    vd = M.value_derivatives(model, 0.0, x, EmpiricalMeasure(xi), cfg, ygrid_size=32)
    target = float(np.sum(vd.ygrid.weights * vd.lfd_grad[:, 0]))
    order = lex_order(xi)
    y, h = 2.5, 0.5

    def mixture(eps, point):
        pts = xi.copy()
        pts[order[::int(round(1 / eps))]] = point
        return EmpiricalMeasure(pts)

    errs = []
    for eps in (0.1, 0.05, 0.025):
        vp = value(model, 0.0, x, mixture(eps, y + h), cfg, control_variate=False)
        vm = value(model, 0.0, x, mixture(eps, y - h), cfg, control_variate=False)
        errs.append(abs((vp - vm) / (2 * h * eps) - target))
    ok = errs[0] > errs[1] > errs[2]
    assert record(10, "Measure-derivative oracle", ok, "errors " + ", ".join(f"{e:.3f}" for e in errs))


def test_c11_master_residual():
    model = build_lq_model()
    probes = ([1.0], [-2.0], [0.0])
    reports = []
    for N, K, delta in ((5000, 100, 0.025), (20000, 200, 0.0125)):
        cfg = SolverConfig(N=N, K=K, seed=3)
        mu0 = normal_cloud(N)
        reports.append(M.master_residual(model, 0.0, probes[0], mu0, cfg, delta=delta, probes=probes[1:],
                                         ygrid_size=16))
    coarse = [abs(p["residual_mode_b"]) for p in reports[0].probes]
    fine = [abs(p["residual_mode_b"]) for p in reports[1].probes]
    mode_a = max(abs(p["residual_mode_a"]) for r in reports for p in r.probes)
    terminal = max(p["terminal_error"] for r in reports for p in r.probes)
    ok = (max(coarse) <= 0.05 and all(f < c for f, c in zip(fine, coarse)) and mode_a <= 1e-10
          and terminal <= 1e-3)
    detail = (f"mode b {', '.join(f'{c:.4f}' for c in coarse)} -> {', '.join(f'{f:.4f}' for f in fine)}; "
              f"mode a {mode_a:.1e}; terminal {terminal:.1e}")
    assert record(11, "Master residual", ok, detail)


def test_c12_consistency(solves):
    devs = {}
    for name in ("mf_lq", "demo"):
        model, sol, _ = solves[name]
        fr = solve_control_frozen(model, 0.0, sol.X[0], sol.measure_flow, sol.dB, BIG, warm_fields=sol.fields)
        devs[name] = max(float(np.max(np.abs(getattr(fr, c) - getattr(sol, c)))) for c in "XPv")
    ok = all(v <= 1e-6 for v in devs.values())
    assert record(12, "Consistency x = xi", ok, ", ".join(f"{k} {v:.1e}" for k, v in devs.items()))


def test_c13_determinism(tmp_path):
    doc = {"model": {"family": "nonlinear_demo", "params": {}}, "grid": {"K": 10}, "particles": 200, "seed": 1,
           "probes": {"x": [[1.0], [0.0]], "ygrid": 4, "companions": 32, "delta_t": 0.1}}
    lq = dict(doc, model={"family": "lq", "params": {}})
    mismatched = []
    for command in cli.COMMANDS:
        path = tmp_path / f"{command}.json"
        path.write_text(json.dumps(lq if command == "bench-lq" else doc))
        dirs = []
        for run in ("a", "b"):
            out = tmp_path / command / run
            cli.main([command, "--config", str(path), "--out", str(out)])
            dirs.append(out)
        names = sorted(os.listdir(dirs[0]))
        assert names == sorted(os.listdir(dirs[1]))
        mismatched += [f"{command}/{n}" for n in names
                       if not filecmp.cmp(dirs[0] / n, dirs[1] / n, shallow=False)]
    assert record(13, "Determinism", not mismatched,
                  "all artifacts byte-identical" if not mismatched else ", ".join(mismatched))


def test_c14_flow_linearity(mf_lq_mid):
    _, _, xi, base = mf_lq_mid
    eta = np.sin(2 * xi) + 0.3 * xi ** 2
    D1 = F.gateaux_xi(base, eta=eta)
    D2 = F.gateaux_xi(base, eta=2 * eta)
    dev = max(float(np.max(np.abs(getattr(D2, c) - 2 * getattr(D1, c))) / np.max(np.abs(2 * getattr(D1, c))))
              for c in "XPv")
    assert record(14, "Flow linearity", dev <= 1e-12, f"relative deviation {dev:.1e}")
