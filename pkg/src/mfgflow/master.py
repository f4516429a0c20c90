"""Derivatives of the value functional and the master-equation residual.

The value ``V(t, x, mu)`` is the expected cost of a player starting at ``x``
against the equilibrium flow started from ``mu``. Its derivatives are
assembled from flows along the player's frozen solution:

* ``D_x V`` and ``D_x^2 V`` are the initial adjoint and its Jacobian;
* ``D_y dV/dnu`` and ``D_y^2 dV/dnu`` integrate the cost derivatives against
  kernel flows, companion flows and their y-derivatives on a y-grid;
* ``dV/dt`` follows from the other derivatives through the master equation,
  and independently from a forward difference in the start time.
"""
from dataclasses import dataclass, field
import json

import numpy as np

from . import flows as F
from .fbsde import _cone_constant, _full, solve_mfg, trapezoid_weights, value_estimate
from .hamiltonian import hamiltonian, v_hat
from .measures import as_measure, w2_to_dirac
from .model import CapabilityError


class MasterError(RuntimeError):
    """The value derivatives could not be assembled."""


@dataclass
class ValueDerivatives:
    """Value functional and its derivatives at one ``(t, x, mu)``.

    Attributes
    ----------
    lfd_grad : ndarray, shape (R, n)
        ``D_y dV/dnu`` at the y-grid points.
    lfd_hess : ndarray, shape (R, n, n)
        ``D_y^2 dV/dnu`` at the y-grid points.
    dtV : float
        Time derivative from the master equation (see ``dt_value``).
    """

    t: float
    x: np.ndarray
    V: float
    V_stderr: float
    dxV: np.ndarray
    dxxV: np.ndarray
    lfd_grad: np.ndarray = None
    lfd_hess: np.ndarray = None
    ygrid: object = None
    dtV: float = None
    extras: dict = field(default_factory=dict)

    @property
    def hessian_asymmetry(self):
        return float(np.max(np.abs(self.dxxV - self.dxxV.T)))


def dx_value(base, flows=None):
    """``(D_x V, D_x^2 V)`` from a frozen solution started at a single point.

    ``D_x V`` is the initial adjoint and ``D_x^2 V`` the initial adjoint of
    the Jacobian flow, both averaged over the particles.
    """
    J = F.jacobian_x(base) if flows is None else flows
    dxV = np.mean(base.P[0], axis=0)
    dxxV = np.mean(J.P[0], axis=0)
    return dxV, dxxV


def _node_state(sol, k):
    g = sol.grid
    return g.nodes[k], sol.X[k], sol.measure_flow[k], sol.v[k]


def _running_and_terminal(xsol, integrand, terminal):
    """Trapezoid in time of particle means of ``integrand(k)`` plus the terminal term."""
    w = trapezoid_weights(xsol.grid)
    total = 0.0
    for k in range(xsol.grid.K + 1):
        total = total + w[k] * np.mean(integrand(k), axis=0)
    return total + np.mean(terminal(), axis=0)


def lfd_value(xsol, base, kflows):
    """``D_y dV/dnu`` on the y-grid of ``kflows``.

    Parameters
    ----------
    xsol : FBSDESolution
        Frozen solution of the player from ``x``.
    base : FBSDESolution
        Equilibrium solution.
    kflows : dict
        Output of ``kernel_flows`` with ``x_solution=xsol``.

    Returns
    -------
    ndarray, shape (R, n)
    """
    model = base.model
    n = model.n
    R = len(kflows["ygrid"].index)
    if not model.has_mean_field:
        return np.zeros((R, n))
    mu, xi, comp = kflows["mu"], kflows["xi"], kflows["companions"]
    N = xsol.N
    K = xsol.grid.K

    def copies(ks, k, name):
        out = ks.contract(name, F.copy_context(base, k), xi.X[k])
        for r in range(R):
            out[:, r * n:(r + 1) * n] += ks.contract(name, comp.context(r, k), comp.J.X[k, comp.block(r)])
        return out

    def integrand(k):
        s, X, m, v = _node_state(xsol, k)
        fx = _full(model.f_x(s, X, m, v), N, (n,))
        fv = _full(model.f_v(s, X, m, v), N, (model.d,))
        val = np.einsum("ia,iaq->iq", fx, mu.X[k]) + np.einsum("ie,ieq->iq", fv, mu.v[k])
        return val + copies(F.kernels_at(xsol, k), k, "f")

    def terminal():
        gx = _full(model.g_x(xsol.X[K], xsol.measure_flow[K]), N, (n,))
        return np.einsum("ia,iaq->iq", gx, mu.X[K]) + copies(F.kernels_at(xsol, K), K, "g")

    return _running_and_terminal(xsol, integrand, terminal).reshape(R, n)


def lfd2_value(xsol, base, kflows, kflows_y):
    """``D_y^2 dV/dnu`` on the y-grid.

    ``kflows_y`` is the output of ``kernel_flow_yderiv``; the companions in
    ``kflows`` must carry their second derivatives.

    Returns
    -------
    ndarray, shape (R, n, n)
    """
    model = base.model
    n = model.n
    R = len(kflows["ygrid"].index)
    if not model.has_mean_field:
        return np.zeros((R, n, n))
    if not model.has_third_derivatives:
        raise CapabilityError(f"{model.name} does not provide third derivatives")
    comp = kflows["companions"]
    if comp.H is None:
        raise MasterError("companion second derivatives are missing; run kernel_flow_yderiv first")
    mu, xi = kflows_y["mu"], kflows_y["xi"]
    N = xsol.N
    K = xsol.grid.K
    nn = n * n
    JX, HX = comp.J.X, comp.H.X

    def copies(ks, k, name):
        out = ks.contract(name, F.copy_context(base, k), xi.X[k])
        for r in range(R):
            b = comp.block(r)
            ctx = comp.context(r, k)
            outer = np.einsum("iec,ifd->iefcd", JX[k, b], JX[k, b]).reshape(-1, nn, nn)
            out[:, r * nn:(r + 1) * nn] += (ks.contract(name, ctx, HX[k, b])
                                            + ks.contract(name, ctx, outer, second=True))
        return out

    def integrand(k):
        s, X, m, v = _node_state(xsol, k)
        fx = _full(model.f_x(s, X, m, v), N, (n,))
        fv = _full(model.f_v(s, X, m, v), N, (model.d,))
        val = np.einsum("ia,iaq->iq", fx, mu.X[k]) + np.einsum("ie,ieq->iq", fv, mu.v[k])
        return val + copies(F.kernels_at(xsol, k), k, "f")

    def terminal():
        gx = _full(model.g_x(xsol.X[K], xsol.measure_flow[K]), N, (n,))
        return np.einsum("ia,iaq->iq", gx, mu.X[K]) + copies(F.kernels_at(xsol, K), K, "g")

    return _running_and_terminal(xsol, integrand, terminal).reshape(R, n, n)


def _diffusion(model, t, x, m):
    sig = np.asarray(model.sigma(t, np.atleast_2d(x), m), dtype=np.float64)
    return np.einsum("iaj,ibj->iab", sig, sig)


def master_terms(vd, model, base):
    """Spatial and measure terms of the master equation at ``vd``.

    Returns the dict ``{"trace", "hamiltonian", "measure"}`` with
    ``trace = Tr[sigma sigma' D_x^2 V] / 2`` and ``measure`` the y-grid
    quadrature of ``D_p H(y, D_x V(y))' D_y dV/dnu(y)
    + Tr[sigma sigma'(y) D_y^2 dV/dnu(y)] / 2``. ``D_x V`` at the grid points
    is the equilibrium adjoint at those particles.
    """
    t = vd.t
    m0 = base.measure_flow[0]
    x = vd.x.reshape(1, -1)
    a = _diffusion(model, t, x, m0)[0]
    trace = 0.5 * float(np.sum(a * vd.dxxV))
    ham = float(hamiltonian(model, t, x, m0, vd.dxV.reshape(1, -1))[0])
    measure = 0.0
    if model.has_mean_field and vd.ygrid is not None:
        yg = vd.ygrid
        y = yg.points
        py = base.P[0][yg.index]
        vy = v_hat(model, t, y, m0, py)
        drift = _full(model.b(t, y, m0, vy), len(y), (model.n,))
        ay = _diffusion(model, t, y, m0)
        per = np.sum(drift * vd.lfd_grad, axis=1)
        if vd.lfd_hess is not None:
            per = per + 0.5 * np.sum(ay * vd.lfd_hess, axis=(1, 2))
        measure = float(np.sum(yg.weights * per))
    return {"trace": trace, "hamiltonian": ham, "measure": measure}


def dt_value(vd, model, base):
    """``dV/dt`` from the master equation: minus the sum of the other terms."""
    terms = master_terms(vd, model, base)
    return -(terms["trace"] + terms["hamiltonian"] + terms["measure"])


def value_derivatives(model, t, x, mu0, config, mfg=None, ygrid_size=32, companion_count=None,
                      control_variate=True):
    """Run the pipeline: equilibrium, player solve, flows and derivatives.

    Parameters
    ----------
    model : CoefficientModel
    t : float
    x : array_like, shape (n,)
    mu0 : EmpiricalMeasure or array
    config : SolverConfig
    mfg : FBSDESolution, optional
        Equilibrium from ``t``; solved when omitted.
    ygrid_size : int
        Number of quantile-stratified y-grid points.

    Returns
    -------
    ValueDerivatives
    """
    mu0 = as_measure(mu0)
    x = np.asarray(x, dtype=np.float64).reshape(model.n)
    if mfg is None:
        mfg = solve_mfg(model, t, mu0, config)
    ve = value_estimate(model, t, x, mu0, config, mfg=mfg, control_variate=control_variate)
    xsol = ve.frozen
    dxV, dxxV = dx_value(xsol)
    vd = ValueDerivatives(float(t), x, ve.value, ve.stderr, dxV, dxxV)
    n = model.n
    ygrid = F.quantile_grid(mfg.X[0], ygrid_size)
    vd.ygrid = ygrid
    R = len(ygrid.index)
    if model.has_mean_field:
        kf = F.kernel_flows(mfg, ygrid=ygrid, x_solution=xsol, companion_count=companion_count)
        vd.lfd_grad = lfd_value(xsol, mfg, kf)
        if model.has_third_derivatives:
            ky = F.kernel_flow_yderiv(mfg, kflows=kf, x_solution=xsol)
            vd.lfd_hess = lfd2_value(xsol, mfg, kf, ky)
        vd.extras["kernel_flows"] = kf
    else:
        vd.lfd_grad = np.zeros((R, n))
        vd.lfd_hess = np.zeros((R, n, n))
    vd.dtV = dt_value(vd, model, mfg)
    vd.extras["mfg"] = mfg
    vd.extras["x_solution"] = xsol
    return vd


def growth_margin(model, x, mu0, dxV):
    """``K (1 + |x| + W2(mu, delta_0)) - |D_x V|`` when a cone constant is available."""
    Kc = _cone_constant(model)
    if Kc is None:
        return None
    return float(Kc * (1 + np.linalg.norm(x) + w2_to_dirac(as_measure(mu0))) - np.linalg.norm(dxV))


@dataclass
class MasterReport:
    """Master-equation check at one or more probe points."""

    t: float
    delta: float
    probes: list

    @property
    def primary(self):
        return self.probes[0]

    def to_dict(self):
        p = self.primary
        return {
            "t": self.t,
            "delta_t": self.delta,
            "V": p["V"],
            "dxV": p["dxV"],
            "dxxV": p["dxxV"],
            "dtV": p["dtV"],
            "dtV_fd": p["dtV_fd"],
            "residual_mode_a": p["residual_mode_a"],
            "residual_mode_b": p["residual_mode_b"],
            "terminal_error": p["terminal_error"],
            "growth_margin": p["growth_margin"],
            "probes": self.probes,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def master_residual(model, t, x, mu0, config, delta=0.025, probes=None, ygrid_size=32, companion_count=None):
    """Master-equation residual at ``(t, x, mu)``.

    Mode (a) uses ``dV/dt`` from ``dt_value`` and is zero up to roundoff.
    Mode (b) replaces it by the forward difference
    ``(V(t + delta, x, mu) - V(t, x, mu)) / delta``, re-solving the game from
    ``t + delta`` with the same number of steps and the same normalized
    noise. The terminal check compares ``V(T, x, mu)`` with ``g(x, mu)``.

    Parameters
    ----------
    x : array_like, shape (n,)
        Primary probe point.
    probes : sequence of array_like, optional
        Additional probe points reported after the primary one.

    Returns
    -------
    MasterReport
    """
    mu0 = as_measure(mu0)
    if not 0 < delta < config.T - t:
        raise ValueError("delta must lie in (0, T - t)")
    points = [np.asarray(x, dtype=np.float64).reshape(model.n)]
    for p in probes or ():
        points.append(np.asarray(p, dtype=np.float64).reshape(model.n))
    mfg = solve_mfg(model, t, mu0, config)
    mfg_shift = solve_mfg(model, t + delta, mu0, config)
    out = []
    for pt in points:
        vd = value_derivatives(model, t, pt, mu0, config, mfg=mfg, ygrid_size=ygrid_size,
                               companion_count=companion_count)
        terms = master_terms(vd, model, mfg)
        rest = terms["trace"] + terms["hamiltonian"] + terms["measure"]
        V_shift = value_estimate(model, t + delta, pt, mu0, config, mfg=mfg_shift).value
        dtV_fd = (V_shift - vd.V) / delta
        VT = value_estimate(model, config.T, pt, mu0, config).value
        gT = float(np.asarray(model.g(pt[None], mu0)).reshape(-1)[0])
        out.append({
            "x": pt.tolist(),
            "V": vd.V,
            "V_stderr": vd.V_stderr,
            "dxV": vd.dxV.tolist(),
            "dxxV": vd.dxxV.tolist(),
            "dxxV_asymmetry": vd.hessian_asymmetry,
            "lfd_grad": vd.lfd_grad.tolist(),
            "lfd_hess": None if vd.lfd_hess is None else vd.lfd_hess.tolist(),
            "ygrid": vd.ygrid.points.tolist(),
            "ygrid_weights": vd.ygrid.weights.tolist(),
            "dtV": vd.dtV,
            "dtV_fd": dtV_fd,
            "terms": terms,
            "residual_mode_a": vd.dtV + rest,
            "residual_mode_b": dtV_fd + rest,
            "terminal_error": abs(VT - gT),
            "growth_margin": growth_margin(model, pt, mu0, vd.dxV),
        })
    return MasterReport(float(t), float(delta), out)
