import sys

import numpy as np
import pytest

from mfgflow.fbsde import SolverConfig, solve_mfg, value_estimate
from mfgflow.measures import EmpiricalMeasure
from mfgflow.model import TimeGrid, build_lq_model, build_nonlinear_demo, generate_paths

# mean-field LQ instance used throughout (drift and cost both see the mean)
MF_LQ = dict(Qx=2.0, Qv=2.0, Qg=1.0, sigma0=0.5, Abar=0.2, kappa=0.5)


def normal_cloud(N, seed=11, mean=0.0, std=1.0):
    z = generate_paths(TimeGrid(0.0, 1.0, 1), N, seed, stream=1).increments[:, 0]
    return EmpiricalMeasure(mean + std * z)


@pytest.fixture(scope="session")
def pi1_model():
    return build_lq_model()


@pytest.fixture(scope="session")
def mf_lq_model():
    return build_lq_model(**MF_LQ)


@pytest.fixture(scope="session")
def demo_model():
    return build_nonlinear_demo()[0]


@pytest.fixture(scope="session")
def small_config():
    return SolverConfig(N=600, K=20, seed=3)


@pytest.fixture(scope="session")
def mf_lq_base(mf_lq_model):
    cfg = SolverConfig(N=800, K=20, seed=3)
    return solve_mfg(mf_lq_model, 0.0, normal_cloud(cfg.N, mean=0.4), cfg)


@pytest.fixture(scope="session")
def demo_base(demo_model):
    cfg = SolverConfig(N=800, K=20, seed=3)
    return solve_mfg(demo_model, 0.0, normal_cloud(cfg.N, mean=0.3), cfg)


@pytest.fixture(scope="session")
def pi1_base(pi1_model):
    cfg = SolverConfig(N=800, K=20, seed=3)
    return solve_mfg(pi1_model, 0.0, normal_cloud(cfg.N), cfg)


@pytest.fixture(scope="session")
def mf_lq_player(mf_lq_model, mf_lq_base):
    """Frozen solution started at x = 1 against the mean-field LQ equilibrium."""
    mu0 = EmpiricalMeasure(mf_lq_base.X[0])
    return value_estimate(mf_lq_model, 0.0, [1.0], mu0, mf_lq_base.config, mfg=mf_lq_base).frozen


@pytest.fixture(scope="session")
def demo_player(demo_model, demo_base):
    mu0 = EmpiricalMeasure(demo_base.X[0])
    return value_estimate(demo_model, 0.0, [0.5], mu0, demo_base.config, mfg=demo_base).frozen


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = float(np.max(np.abs(b)))
    err = float(np.max(np.abs(a - b)))
    return err / scale if scale > 0 else err


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(mod.RESULTS):
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
