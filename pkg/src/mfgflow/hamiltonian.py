"""Lagrangian, Hamiltonian and the pointwise minimizer over the control.

``L(s, x, m, v, p) = p . b(s, x, m, v) + f(s, x, m, v)`` and
``H = inf_v L``. Everything is vectorized over particles.
"""
from dataclasses import dataclass

import numpy as np

from . import _small

NEWTON_TOL = 1e-10
NEWTON_MAX = 50
CURVATURE_FLOOR = 1e-10


class MinimizerError(RuntimeError):
    """Newton/gradient iteration failed to reach the tolerance."""

    def __init__(self, message, v_last=None, residual=None, index=None):
        super().__init__(message)
        self.v_last = v_last
        self.residual = residual
        self.index = index


@dataclass
class MinimizerResult:
    v_hat: np.ndarray
    iterations: int
    residual: np.ndarray
    converged: bool
    fallback_steps: int = 0


def _bcast(a, N, shape):
    return np.broadcast_to(np.asarray(a, dtype=np.float64), (N,) + shape)


def lagrangian(model, s, x, m, v, p):
    """Evaluate ``p . b + f`` at every particle, shape (N,)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    b = _bcast(model.b(s, x, m, v), x.shape[0], (model.n,))
    f = _bcast(model.f(s, x, m, v), x.shape[0], ())
    out = np.sum(p * b, axis=1) + f
    if not np.all(np.isfinite(out)):
        i = int(np.argmax(~np.isfinite(out)))
        raise FloatingPointError(f"non-finite Lagrangian at particle {i}")
    return out


def lagrangian_grad_v(model, s, x, m, v, p):
    """``D_v L = D_v b^T p + D_v f``, shape (N, d)."""
    N = x.shape[0]
    bv = _bcast(model.b_v(s, x, m, v), N, (model.n, model.d))
    fv = _bcast(model.f_v(s, x, m, v), N, (model.d,))
    return np.einsum("iae,ia->ie", bv, p) + fv


def lagrangian_hess_v(model, s, x, m, v, p):
    """``D_v^2 L``, shape (N, d, d)."""
    N = x.shape[0]
    bvv = _bcast(model.b_vv(s, x, m, v), N, (model.n, model.d, model.d))
    fvv = _bcast(model.f_vv(s, x, m, v), N, (model.d, model.d))
    return np.einsum("iagh,ia->igh", bvv, p) + fvv


def minimize_lagrangian(model, s, x, m, p, tol=NEWTON_TOL, max_iter=NEWTON_MAX, v0=None, raise_on_failure=True):
    """Minimize the Lagrangian over the control for every particle.

    Newton's method on ``D_v L = 0``. Where the curvature ``D_v^2 L`` has an
    eigenvalue below 1e-10 the step falls back to a backtracking gradient
    step on ``L``.

    Parameters
    ----------
    model : CoefficientModel
    s : float
    x : ndarray, shape (N, n)
    m : EmpiricalMeasure
    p : ndarray, shape (N, n)
    tol : float
        Target for ``|D_v L|``.
    v0 : ndarray, shape (N, d), optional
        Warm start; zero when omitted.

    Returns
    -------
    MinimizerResult
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    N = x.shape[0]
    v = np.zeros((N, model.d)) if v0 is None else np.array(v0, dtype=np.float64).reshape(N, model.d)
    g = lagrangian_grad_v(model, s, x, m, v, p)
    res = np.linalg.norm(g, axis=1)
    it = 0
    fallback = 0
    active = res > tol
    while np.any(active) and it < max_iter:
        it += 1
        idx = np.nonzero(active)[0]
        xa, va, pa, ga = x[idx], v[idx], p[idx], g[idx]
        H = lagrangian_hess_v(model, s, xa, m, va, pa)
        H = 0.5 * (H + np.swapaxes(H, 1, 2))
        lam = _small.min_eig_sym(H)
        good = lam > CURVATURE_FLOOR
        step = np.zeros_like(va)
        if np.any(good):
            step[good] = -_small.solve(H[good], ga[good])
        if np.any(~good):
            fallback += int(np.sum(~good))
            step[~good] = -ga[~good]
        # backtracking: Newton steps must reduce |D_v L|, gradient steps must
        # reduce L (Armijo); the Lagrangian is only evaluated when needed
        t = np.ones(len(idx))
        r0 = res[idx]
        L0 = None
        vn = va + step
        for _ in range(30):
            gn = lagrangian_grad_v(model, s, xa, m, vn, pa)
            rn = np.linalg.norm(gn, axis=1)
            ok = (rn <= tol) | (good & (rn < r0))
            if not np.all(ok):
                if L0 is None:
                    L0 = lagrangian(model, s, xa, m, va, pa)
                Ln = lagrangian(model, s, xa, m, vn, pa)
                ok |= ~good & (Ln < L0 - 1e-4 * t * np.sum(ga * ga, axis=1))
            ok &= np.all(np.isfinite(vn), axis=1)
            if np.all(ok):
                break
            t = np.where(ok, t, 0.5 * t)
            vn = np.where(ok[:, None], vn, va + t[:, None] * step)
        v[idx] = vn
        g[idx] = gn
        res[idx] = rn
        active = res > tol
    conv = bool(np.all(res <= tol))
    if not conv and raise_on_failure:
        i = int(np.argmax(res))
        raise MinimizerError(f"minimizer did not converge: |D_v L| = {res[i]:.3e} at particle {i}",
                             v_last=v, residual=res, index=i)
    return MinimizerResult(v, it, res, conv, fallback)


def v_hat(model, s, x, m, p, tol=NEWTON_TOL, v0=None):
    return minimize_lagrangian(model, s, x, m, p, tol=tol, v0=v0).v_hat


def hamiltonian(model, s, x, m, p, tol=NEWTON_TOL, v0=None):
    """``H(s, x, m, p)`` per particle."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    v = v_hat(model, s, x, m, p, tol, v0)
    return lagrangian(model, s, x, m, v, p)


def dpH(model, s, x, m, p, tol=NEWTON_TOL, v0=None):
    """``D_p H = b(s, x, m, v_hat)``, shape (N, n)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    v = v_hat(model, s, x, m, p, tol, v0)
    return _bcast(model.b(s, x, m, v), x.shape[0], (model.n,)).copy()


def dxH(model, s, x, m, p, tol=NEWTON_TOL, v0=None):
    """``D_x H = D_x b(s, x, m, v_hat)^T p + D_x f(s, x, m, v_hat)``, shape (N, n)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    v = v_hat(model, s, x, m, p, tol, v0)
    return dxH_at(model, s, x, m, v, p)


def dxH_at(model, s, x, m, v, p):
    N = x.shape[0]
    bx = _bcast(model.b_x(s, x, m, v), N, (model.n, model.n))
    fx = _bcast(model.f_x(s, x, m, v), N, (model.n,))
    return np.einsum("iac,ia->ic", bx, p) + fx
