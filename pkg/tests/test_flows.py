import csv

import numpy as np
import pytest

from mfgflow import flows as F
from mfgflow.fbsde import SolverConfig, solve_control_frozen, solve_mfg
from mfgflow.measures import EmpiricalMeasure
from mfgflow.model import build_lq_model, build_nonlinear_demo

from conftest import normal_cloud, rel_err


def _frozen(model, base, x, paths):
    N = base.X.shape[1]
    x0 = np.tile(np.atleast_1d(np.asarray(x, dtype=np.float64)), (N, 1))
    return solve_control_frozen(model, 0.0, x0, base.measure_flow, paths, base.config, warm_fields=base.fields)


def _direction(base):
    xi = base.X[0]
    return np.sin(2 * xi) + 0.3 * xi ** 2


# --------------------------------------------------------------------------
# Jacobian in the initial state


def test_jacobian_starts_at_identity(demo_base):
    J = F.jacobian_x(demo_base)
    assert np.array_equal(J.X[0, :, 0, 0], np.ones(demo_base.X.shape[1]))


def test_jacobian_pi1_matches_exponential_decay(pi1_base):
    # optimal feedback is v = -x, so X_s depends on x through exp(-s)
    J = F.jacobian_x(pi1_base)
    s = pi1_base.grid.nodes
    assert rel_err(J.X[:, :, 0, 0], np.broadcast_to(np.exp(-s)[:, None], J.X.shape[:2])) < 0.03
    assert np.max(np.abs(J.P[0, :, 0, 0] - 1.0)) < 0.03


def test_jacobian_without_feedback_is_identity():
    # no state cost and no state-dependent noise: the adjoint never sees x
    model = build_lq_model(Qx=0.0, Qg=0.0, sigma1=0.0)
    cfg = SolverConfig(N=300, K=10, seed=5)
    base = solve_mfg(model, 0.0, normal_cloud(cfg.N), cfg)
    J = F.jacobian_x(base)
    assert np.max(np.abs(J.X[..., 0, 0] - 1.0)) < 1e-12
    assert np.max(np.abs(J.P)) < 1e-12
    assert np.max(np.abs(J.v)) < 1e-12


def test_jacobian_matches_common_noise_difference(demo_model, demo_base, demo_player):
    h = 1e-3
    x = 0.5
    paths = demo_player.dB
    s0 = _frozen(demo_model, demo_base, x, paths)
    sp = _frozen(demo_model, demo_base, x + h, paths)
    sm = _frozen(demo_model, demo_base, x - h, paths)
    J = F.jacobian_x(s0)
    for comp in ("X", "P", "v"):
        fd = (getattr(sp, comp) - getattr(sm, comp)) / (2 * h)
        assert rel_err(getattr(J, comp)[..., 0], fd) < 1e-2, comp


# --------------------------------------------------------------------------
# Gateaux derivative in the initial law


def test_gateaux_zero_direction_is_zero(mf_lq_base):
    D = F.gateaux_xi(mf_lq_base, eta=np.zeros_like(mf_lq_base.X[0]))
    for comp in ("X", "P", "v"):
        assert np.max(np.abs(getattr(D, comp))) == 0.0


def test_gateaux_without_mean_field_is_jacobian_action(pi1_base):
    eta = _direction(pi1_base)
    dec = F.decompose_gateaux(pi1_base, eta=eta)
    assert np.max(np.abs(dec.measure_part.X)) < 1e-12
    assert dec.residual < 1e-10


def test_decomposition_lq(mf_lq_base):
    dec = F.decompose_gateaux(mf_lq_base, eta=_direction(mf_lq_base))
    assert dec.residual <= 1e-8
    # the mean-field coupling makes the measure part nonzero
    assert np.max(np.abs(dec.measure_part.X)) > 1e-4


def test_decomposition_demo(demo_base):
    dec = F.decompose_gateaux(demo_base, eta=_direction(demo_base))
    assert dec.residual <= 1e-3


def test_gateaux_is_linear_in_direction(mf_lq_base):
    eta = _direction(mf_lq_base)
    D1 = F.gateaux_xi(mf_lq_base, eta=eta)
    D2 = F.gateaux_xi(mf_lq_base, eta=2 * eta)
    for comp in ("X", "P", "v"):
        a, b = getattr(D2, comp), 2 * getattr(D1, comp)
        assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.max(np.abs(b)))


def test_decomposition_residual_scale_free(mf_lq_base):
    eta = _direction(mf_lq_base)
    r1 = F.decompose_gateaux(mf_lq_base, eta=eta).residual
    r2 = F.decompose_gateaux(mf_lq_base, eta=10 * eta).residual
    assert abs(r1 - r2) < 1e-9


def test_gateaux_requires_equilibrium(mf_lq_player):
    with pytest.raises(F.FlowError):
        F.gateaux_xi(mf_lq_player, eta=np.zeros_like(mf_lq_player.X[0]))


# --------------------------------------------------------------------------
# kernel flows


def test_kernel_flows_vanish_without_mean_field(pi1_base):
    kf = F.kernel_flows(pi1_base, ygrid=8, companion_count=64)
    assert np.max(np.abs(kf["xi"].X)) == 0.0


def test_quantile_grid_weights():
    cloud = normal_cloud(101).particles
    g = F.quantile_grid(cloud, 10)
    assert g.weights.sum() == pytest.approx(1.0)
    assert sum(len(s) for s in g.strata) == 101
    assert np.all(np.diff(g.points[:, 0]) > 0)
    for r, s in enumerate(g.strata):
        assert g.index[r] in s


@pytest.fixture(scope="module")
def mf_lq_kernels(mf_lq_base, mf_lq_player):
    return F.kernel_flows(mf_lq_base, ygrid=16, x_solution=mf_lq_player, companion_count=256)


def test_kernel_flows_start_at_zero(mf_lq_kernels):
    assert np.max(np.abs(mf_lq_kernels["xi"].X[0])) == 0.0
    assert np.max(np.abs(mf_lq_kernels["mu"].X[0])) == 0.0


def test_kernel_lifting_lq(mf_lq_base, mf_lq_player, mf_lq_kernels):
    eta = _direction(mf_lq_base)
    out = F.lifting_check(mf_lq_base, eta, mf_lq_kernels, x_solution=mf_lq_player)
    assert out["xi"] <= 0.02
    assert out["mu"] <= 0.02


def test_kernel_lifting_demo(demo_base, demo_player):
    kf = F.kernel_flows(demo_base, ygrid=16, x_solution=demo_player, companion_count=256)
    out = F.lifting_check(demo_base, _direction(demo_base), kf, x_solution=demo_player)
    assert out["xi"] <= 0.05
    assert out["mu"] <= 0.05


# --------------------------------------------------------------------------
# second-order flows


def test_hessian_vanishes_on_lq(mf_lq_base):
    H = F.hessian_x(mf_lq_base)
    for comp in ("X", "P", "v"):
        assert np.max(np.abs(getattr(H, comp))) < 1e-12


def test_hessian_matches_second_difference(demo_model, demo_base, demo_player):
    h = 1e-2
    x = 0.5
    paths = demo_player.dB
    s0 = _frozen(demo_model, demo_base, x, paths)
    sp = _frozen(demo_model, demo_base, x + h, paths)
    sm = _frozen(demo_model, demo_base, x - h, paths)
    H = F.hessian_x(s0)
    for comp in ("X", "P"):
        fd = (getattr(sp, comp) - 2 * getattr(s0, comp) + getattr(sm, comp)) / h ** 2
        assert rel_err(getattr(H, comp)[..., 0], fd) < 0.05, comp


def test_hessian_symmetric_in_two_dimensions():
    model = build_nonlinear_demo(n=2, d=2)[0]
    cfg = SolverConfig(N=300, K=10, seed=5)
    rng = np.random.default_rng(4)
    base = solve_mfg(model, 0.0, EmpiricalMeasure(0.5 * rng.standard_normal((cfg.N, 2))), cfg)
    H = F.hessian_x(base)
    for comp in ("X", "P"):
        T = getattr(H, comp).reshape(getattr(H, comp).shape[:3] + (2, 2))
        assert np.max(np.abs(T - np.swapaxes(T, -1, -2))) < 1e-10 * max(1.0, np.max(np.abs(T)))
    assert np.max(np.abs(H.X)) > 0


def test_kernel_yderiv_vanishes_without_mean_field(pi1_base):
    kf = F.kernel_flows(pi1_base, ygrid=4, companion_count=32)
    ky = F.kernel_flow_yderiv(pi1_base, kflows=kf)
    assert np.max(np.abs(ky["xi"].X)) == 0.0


def _shifted_grid_check(base, player, size=4, count=128, h=1e-3):
    grid = F.quantile_grid(base.X[0], size)
    kf = F.kernel_flows(base, ygrid=grid, x_solution=player, companion_count=count)
    ky = F.kernel_flow_yderiv(base, kflows=kf, x_solution=player)

    def shifted(sign):
        g = F.YGrid(grid.index, grid.points + sign * h, grid.weights, grid.strata)
        return F.kernel_flows(base, ygrid=g, x_solution=player, companion_count=count)

    kp, km = shifted(1), shifted(-1)
    return {key: (ky[key].X, (kp[key].X - km[key].X) / (2 * h)) for key in ("xi", "mu")}


def test_kernel_yderiv_zero_on_linear_quadratic(mf_lq_base, mf_lq_player):
    # kernels are constant in y and companions are affine in their start
    for key, (ky, fd) in _shifted_grid_check(mf_lq_base, mf_lq_player).items():
        assert np.max(np.abs(ky)) < 1e-12, key
        assert np.max(np.abs(fd)) < 1e-8, key


def test_kernel_yderiv_matches_shifted_grid(demo_base, demo_player):
    # the two sides differentiate different regression surfaces (the fitted
    # gain versus the fitted second-order affine part), so they agree only up
    # to the regression bias of the degree-2 basis
    for key, (ky, fd) in _shifted_grid_check(demo_base, demo_player).items():
        assert np.max(np.abs(fd)) > 1e-4, key
        assert rel_err(ky, fd) <= 0.12, key


# --------------------------------------------------------------------------
# export


def test_flow_bundle_csv(tmp_path, mf_lq_base):
    J = F.jacobian_x(mf_lq_base)
    bundle = F.FlowBundle(mf_lq_base, jacobian=J, particles=range(3))
    paths = bundle.to_csv(str(tmp_path))
    assert [p.split("/")[-1] for p in paths] == ["flow_jacobian_x.csv"]
    with open(paths[0]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "particle", "column", "X1", "P1", "v1"]
    K = mf_lq_base.grid.K
    assert len(rows) == 1 + (K + 1) * 3
    assert float(rows[1][3]) == 1.0
    last = rows[-1]
    assert float(last[4]) == J.P[K, 2, 0, 0]
