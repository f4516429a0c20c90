"""Reference solutions for the linear-quadratic family.

For ``b = A x + Abar mean + B v``, ``f = x'Qx x/2 + v'Qv v/2 + kappa|x - mean|^2/2``,
``g = x'Qg x/2`` and ``sigma^j(x) = sigma0[:, j] + sigma1[j] x`` the value
function is ``V(s, x) = x' pi x / 2 + x' phi + c`` where, with
``S = B Qv^{-1} B'``:

* ``-pi' = A'pi + pi A - pi S pi + Qx + kappa I + sum_j sigma1_j' pi sigma1_j``,
  ``pi(T) = Qg``;
* ``phi = eta mbar + psi`` with ``eta, psi`` solving linear backward ODEs and
  ``mbar' = (A + Abar - S pi - S eta) mbar - S psi`` the equilibrium mean;
* ``-c' = phi' Abar mbar - phi' S phi / 2 + kappa |mbar|^2 / 2 + tr(sigma0' pi sigma0) / 2``.

The backward system is integrated with classical RK4 on a grid refined by
two, so the forward mean path can use RK4 with exact midpoint values.
"""
from dataclasses import dataclass

import numpy as np

from .model import LQParameters, ModelError, QuadraticModel, TimeGrid

BLOWUP = 1e8


class RiccatiError(RuntimeError):
    """The Riccati solution left the admissible range."""


def _rk4_backward(rhs, yT, T, h, steps):
    """Integrate ``y' = rhs(s, y)`` from ``T`` down by ``steps`` steps of size ``h``."""
    out = [yT]
    y = yT
    s = T
    for _ in range(steps):
        k1 = rhs(s, y)
        k2 = rhs(s - h / 2, y - h / 2 * k1)
        k3 = rhs(s - h / 2, y - h / 2 * k2)
        k4 = rhs(s - h, y - h * k3)
        y = y - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        s = s - h
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > BLOWUP:
            raise RiccatiError(f"Riccati solution blew up near s = {s:.6g}")
        out.append(y)
    return out[::-1]


@dataclass
class LQData:
    n: int
    A: np.ndarray
    Abar: np.ndarray
    B: np.ndarray
    Qx: np.ndarray
    Qv: np.ndarray
    Qg: np.ndarray
    kappa: float
    sigma0: np.ndarray
    sigma1: np.ndarray

    @classmethod
    def from_any(cls, spec):
        if isinstance(spec, QuadraticModel):
            if spec.alpha or spec.gamma or spec.rho or spec.theta:
                raise ModelError("the Riccati oracle needs a purely linear-quadratic model")
            return cls(spec.n, spec.A, spec.Abar, spec.B, spec.Qx, spec.Qv, spec.Qg, spec.kappa,
                       spec._s0, spec._s1)
        if isinstance(spec, dict):
            spec = LQParameters(**spec)
        if not isinstance(spec, LQParameters):
            raise TypeError("expected LQParameters, a parameter dict or a QuadraticModel")
        if spec.alpha or spec.gamma or spec.rho or spec.theta:
            raise ModelError("the Riccati oracle needs a purely linear-quadratic model")
        a = spec.arrays()
        return cls(spec.n, a["A"], a["Abar"], a["B"], a["Qx"], a["Qv"], a["Qg"], float(spec.kappa),
                   a["sigma0"], a["sigma1"])


@dataclass
class RiccatiSolution:
    """Reference value function on a grid.

    Attributes
    ----------
    grid : TimeGrid
    pi : ndarray, shape (K+1, n, n)
    eta, psi : ndarray
        Mean-path coefficients: ``phi = eta mbar + psi``.
    mean_path : ndarray, shape (K+1, n)
    phi : ndarray, shape (K+1, n)
    offset : ndarray, shape (K+1,)
        The constant ``c(s)``.
    """

    grid: TimeGrid
    data: LQData
    pi: np.ndarray
    eta: np.ndarray
    psi: np.ndarray
    mean_path: np.ndarray
    phi: np.ndarray
    offset: np.ndarray
    S: np.ndarray
    Qv_inv: np.ndarray

    def _k(self, k):
        return int(k)

    def value(self, k, x):
        """``V(s_k, x, mu)`` for the mean path this solution was built for."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        k = self._k(k)
        return 0.5 * np.einsum("ia,ab,ib->i", x, self.pi[k], x) + x @ self.phi[k] + self.offset[k]

    def dx_value(self, k, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        k = self._k(k)
        return x @ self.pi[k].T + self.phi[k]

    def dxx_value(self, k):
        return self.pi[self._k(k)].copy()

    adjoint = dx_value

    def feedback(self, k, x):
        """Optimal control ``-Qv^{-1} B' (pi x + phi)``."""
        return -self.dx_value(k, x) @ (self.Qv_inv @ self.data.B.T).T

    def hjb_residual(self, k, x):
        """Residual of the HJB equation at grid node ``k`` for states ``x``.

        Time derivatives come from the ODE right-hand sides, the Hamiltonian
        is minimized in closed form, so the residual measures the algebraic
        consistency of the quadratic ansatz.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        k = self._k(k)
        d = self.data
        pi, phi, mb = self.pi[k], self.phi[k], self.mean_path[k]
        dpi = -_pi_rhs_neg(d, self.S, pi)
        dphi = -_phi_rhs_neg(d, self.S, pi, phi, mb)
        dc = -_c_rhs_neg(d, self.S, pi, phi, mb)
        dt_v = 0.5 * np.einsum("ia,ab,ib->i", x, dpi, x) + x @ dphi + dc
        p = self.dx_value(k, x)
        v = self.feedback(k, x)
        drift = x @ d.A.T + (d.Abar @ mb)[None] + v @ d.B.T
        cost = (0.5 * np.einsum("ia,ab,ib->i", x, d.Qx, x) + 0.5 * np.einsum("ia,ab,ib->i", v, d.Qv, v)
                + 0.5 * d.kappa * np.sum((x - mb) ** 2, axis=1))
        sig = d.sigma0[None] + np.einsum("jac,ic->iaj", d.sigma1, x)
        trace = 0.5 * np.einsum("iaj,ab,ibj->i", sig, pi, sig)
        return dt_v + np.sum(p * drift, axis=1) + cost + trace


def _pi_rhs_neg(d, S, pi):
    """``-pi'``."""
    out = d.A.T @ pi + pi @ d.A - pi @ S @ pi + d.Qx + d.kappa * np.eye(d.n)
    for j in range(d.n):
        out = out + d.sigma1[j].T @ pi @ d.sigma1[j]
    return out


def _noise_cross(d, pi):
    r = np.zeros(d.n)
    for j in range(d.n):
        r = r + d.sigma1[j].T @ pi @ d.sigma0[:, j]
    return r


def _phi_rhs_neg(d, S, pi, phi, mb):
    """``-phi'`` along a given mean."""
    return (d.A - S @ pi).T @ phi + (pi @ d.Abar - d.kappa * np.eye(d.n)) @ mb + _noise_cross(d, pi)


def _c_rhs_neg(d, S, pi, phi, mb):
    tr = 0.5 * np.trace(d.sigma0.T @ pi @ d.sigma0)
    return phi @ d.Abar @ mb - 0.5 * phi @ S @ phi + 0.5 * d.kappa * mb @ mb + tr


def solve_riccati(lq_spec, grid, mean0=None):
    """Integrate the reference system on ``grid``.

    Parameters
    ----------
    lq_spec : LQParameters, dict or QuadraticModel
    grid : TimeGrid
    mean0 : array_like, shape (n,), optional
        Mean of the initial law; zero when omitted.

    Returns
    -------
    RiccatiSolution

    Raises
    ------
    RiccatiError
        When the solution exceeds 1e8 in size.
    """
    d = LQData.from_any(lq_spec)
    n = d.n
    if np.linalg.eigvalsh(0.5 * (d.Qv + d.Qv.T)).min() <= 0:
        raise ModelError("Qv must be positive definite")
    Qv_inv = np.linalg.inv(d.Qv)
    S = d.B @ Qv_inv @ d.B.T
    K = grid.K
    h = grid.dt / 2
    eye = np.eye(n)

    def rhs(s, y):
        pi = y[:n * n].reshape(n, n)
        eta = y[n * n:2 * n * n].reshape(n, n)
        psi = y[2 * n * n:]
        dpi = -_pi_rhs_neg(d, S, pi)
        ma = d.A - S @ pi
        deta = -(ma.T @ eta) - eta @ (d.A + d.Abar - S @ pi) + eta @ S @ eta - pi @ d.Abar + d.kappa * eye
        dpsi = -(ma.T @ psi) + eta @ S @ psi - _noise_cross(d, pi)
        return np.concatenate([dpi.ravel(), deta.ravel(), dpsi])

    yT = np.concatenate([d.Qg.ravel(), np.zeros(n * n), np.zeros(n)])
    fine = np.array(_rk4_backward(rhs, yT, grid.T, h, 2 * K))
    pi_f = fine[:, :n * n].reshape(-1, n, n)
    pi_f = 0.5 * (pi_f + np.swapaxes(pi_f, 1, 2))
    eta_f = fine[:, n * n:2 * n * n].reshape(-1, n, n)
    psi_f = fine[:, 2 * n * n:]

    def mean_rhs(j, m):
        return (d.A + d.Abar - S @ pi_f[j] - S @ eta_f[j]) @ m - S @ psi_f[j]

    m0 = np.zeros(n) if mean0 is None else np.asarray(mean0, dtype=np.float64).reshape(n)
    means = [m0]
    slopes = [mean_rhs(0, m0)]
    m = m0
    for k in range(K):
        j = 2 * k
        k1 = mean_rhs(j, m)
        k2 = mean_rhs(j + 1, m + h * k1)
        k3 = mean_rhs(j + 1, m + h * k2)
        k4 = mean_rhs(j + 2, m + 2 * h * k3)
        m = m + (2 * h) / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        means.append(m)
        slopes.append(mean_rhs(j + 2, m))
    means = np.array(means)
    slopes = np.array(slopes)
    # midpoint means from cubic Hermite interpolation, then Simpson for c
    mids = 0.5 * (means[:-1] + means[1:]) + (grid.dt / 8) * (slopes[:-1] - slopes[1:])
    phi = np.einsum("kab,kb->ka", eta_f[::2], means) + psi_f[::2]
    phi_mid = np.einsum("kab,kb->ka", eta_f[1::2], mids) + psi_f[1::2]
    rate = np.array([_c_rhs_neg(d, S, pi_f[2 * k], phi[k], means[k]) for k in range(K + 1)])
    rate_mid = np.array([_c_rhs_neg(d, S, pi_f[2 * k + 1], phi_mid[k], mids[k]) for k in range(K)])
    inc = grid.dt / 6 * (rate[:-1] + 4 * rate_mid + rate[1:])
    offset = np.zeros(K + 1)
    offset[:-1] = np.cumsum(inc[::-1])[::-1]
    return RiccatiSolution(grid, d, pi_f[::2].copy(), eta_f[::2].copy(), psi_f[::2].copy(), means, phi,
                           offset, S, Qv_inv)


def scalar_riccati_exact(s, T, terminal):
    """Exact solution of ``pi' = pi^2 - 1`` with ``pi(T) = terminal`` for ``|terminal| <= 1``.

    With ``terminal = tanh(a)`` the solution is ``tanh(T - s + a)``; the
    terminal value one gives the constant solution.
    """
    s = np.asarray(s, dtype=np.float64)
    if terminal >= 1.0:
        return np.ones_like(s)
    return np.tanh(T - s + np.arctanh(terminal))
