"""Coefficient models, time grids and Brownian increments.

A model bundles the drift ``b``, the diffusion ``sigma`` (affine in the
state), the running cost ``f`` and the terminal cost ``g`` together with
every derivative the forward-backward systems need. All callbacks are
vectorized over particles:

* ``x`` has shape (N, n), ``v`` has shape (N, d), ``m`` is an
  :class:`~mfgflow.measures.EmpiricalMeasure` and ``s`` a float.
* Plain derivatives carry the particle axis first, e.g. ``b_x`` returns
  (N, n, n) with ``[i, a, c] = d b_a / d x_c``.
* Measure kernels ``D_y d(.)/dnu`` take copy positions ``y`` of shape
  (M, n) and return arrays broadcastable to (N, M, ..., n) where the last
  axis is the derivative in ``y``. Singleton axes mark kernels that do not
  depend on the base point or on the copy point.

Index conventions for higher derivatives: the component index of the
function comes first, then the ``x`` indices, then the ``v`` indices, then
``y`` indices (``b_xv[i, a, c, e] = d^2 b_a / dx_c dv_e``).
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from .measures import EmpiricalMeasure


class ModelError(ValueError):
    """Invalid model parameters or a failed derivative/constant audit."""


class CapabilityError(NotImplementedError):
    """The model does not provide a callback a solver requires."""


# --------------------------------------------------------------------------
# simulation substrate

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t = s_0 < ... < s_K = T``."""

    t: float
    T: float
    K: int

    def __post_init__(self):
        if not (self.K >= 1 and self.T > self.t):
            raise ValueError(f"bad grid t={self.t}, T={self.T}, K={self.K}")

    @property
    def dt(self):
        return (self.T - self.t) / self.K

    @property
    def nodes(self):
        return self.t + self.dt * np.arange(self.K + 1)


@dataclass
class BrownianPaths:
    """Per-particle Brownian increments on a grid.

    ``increments[i, k]`` is the increment of particle ``i`` over
    ``[s_k, s_{k+1}]`` and has covariance ``dt * I``.
    """

    grid: TimeGrid
    seed: int
    stream: int
    increments: np.ndarray

    @property
    def size(self):
        return self.increments.shape[0]

    @property
    def dim(self):
        return self.increments.shape[2]


def generate_paths(grid, N, seed, dim=1, stream=0, first=0):
    """Draw Brownian increments, one independent generator per particle.

    Particle ``i`` draws from ``SeedSequence([seed, stream, first + i])``, so
    enlarging ``N`` leaves existing particles untouched.

    Parameters
    ----------
    grid : TimeGrid
    N : int
        Number of particles.
    seed : int
    dim : int
        Dimension of the Brownian motion.
    stream : int
        Independent family of streams (base cloud, companions, ...).
    first : int
        Index of the first particle's stream.

    Returns
    -------
    BrownianPaths
    """
    if N < 1 or grid.K < 1:
        raise ValueError("need N >= 1 and K >= 1")
    if seed is None:
        raise ValueError("seed is required")
    scale = np.sqrt(grid.dt)
    out = np.empty((N, grid.K, dim))
    for i in range(N):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream), int(first + i)])))
        out[i] = rng.standard_normal((grid.K, dim)) * scale
    return BrownianPaths(grid, int(seed), int(stream), out)


# --------------------------------------------------------------------------
# constants

@dataclass
class AssumptionConstants:
    """Declared structural constants of a model."""

    L: float
    lambda_b: float
    lambda_v: float
    lambda_x: float
    lambda_g: float
    l_b_m: float = 0.0
    l_sigma_m: float = 0.0
    L_b0: float = 0.0
    L_b1: float = 0.0
    L_b2: float = 0.0
    L_f0: float = 0.0
    L_f1: float = 0.0
    L_g: float = 0.0
    n: int = 1

    def __post_init__(self):
        for name, val in asdict(self).items():
            if name != "n" and (not np.isfinite(val) or val < 0):
                raise ModelError(f"constant {name} must be a finite nonnegative number, got {val}")
        cap = self.L * (1 + 1e-12) + 1e-15
        for name in ("L_b0", "L_b1", "L_b2", "L_f0", "L_f1", "L_g", "l_b_m", "l_sigma_m"):
            if getattr(self, name) > cap:
                raise ModelError(f"{name} = {getattr(self, name)} exceeds L = {self.L}")

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# coefficient interface

def _zeros(*shape):
    return np.zeros(shape)


class CoefficientModel:
    """Base class; subclasses override the callbacks they support.

    Measure kernels default to zero, which is correct for models without
    mean-field dependence. Third derivatives raise :class:`CapabilityError`
    unless ``has_third_derivatives`` is set.
    """

    n = 1
    d = 1
    has_mean_field = False
    has_third_derivatives = False
    has_second_measure_derivatives = True
    constants = None
    name = "model"

    # drift ---------------------------------------------------------------
    def b(self, s, x, m, v):
        raise CapabilityError("b")

    def b_x(self, s, x, m, v):
        raise CapabilityError("b_x")

    def b_v(self, s, x, m, v):
        raise CapabilityError("b_v")

    def b_xx(self, s, x, m, v):
        return _zeros(1, self.n, self.n, self.n)

    def b_xv(self, s, x, m, v):
        return _zeros(1, self.n, self.n, self.d)

    def b_vv(self, s, x, m, v):
        return _zeros(1, self.n, self.d, self.d)

    def b_xxx(self, s, x, m, v):
        self._need_third()
        return _zeros(1, self.n, self.n, self.n, self.n)

    def b_xxv(self, s, x, m, v):
        self._need_third()
        return _zeros(1, self.n, self.n, self.n, self.d)

    def b_xvv(self, s, x, m, v):
        self._need_third()
        return _zeros(1, self.n, self.n, self.d, self.d)

    def b_vvv(self, s, x, m, v):
        self._need_third()
        return _zeros(1, self.n, self.d, self.d, self.d)

    # diffusion -----------------------------------------------------------
    def sigma0(self, s, m):
        """(n, n) matrix whose column ``j`` is the constant part of sigma^j."""
        raise CapabilityError("sigma0")

    def sigma1(self, s):
        """(n, n, n) array; ``sigma1[j]`` is the slope matrix of sigma^j."""
        return _zeros(self.n, self.n, self.n)

    def sigma(self, s, x, m):
        """Full diffusion, shape (N, n, n) with column ``j`` = sigma^j(x)."""
        x = np.asarray(x, dtype=np.float64)
        s0 = np.asarray(self.sigma0(s, m))
        s1 = np.asarray(self.sigma1(s))
        return s0[None] + np.einsum("jac,ic->iaj", s1, x)

    # costs ---------------------------------------------------------------
    def f(self, s, x, m, v):
        raise CapabilityError("f")

    def f_x(self, s, x, m, v):
        raise CapabilityError("f_x")

    def f_v(self, s, x, m, v):
        raise CapabilityError("f_v")

    def f_xx(self, s, x, m, v):
        raise CapabilityError("f_xx")

    def f_xv(self, s, x, m, v):
        return _zeros(1, self.n, self.d)

    def f_vv(self, s, x, m, v):
        raise CapabilityError("f_vv")

    def f_xxx(self, s, x, m, v):
        self._need_third()
        return _zeros(1, self.n, self.n, self.n)

    def f_xxv(self, s, x, m, v):
        self._need_third()
        return _zeros(1, self.n, self.n, self.d)

    def f_xvv(self, s, x, m, v):
        self._need_third()
        return _zeros(1, self.n, self.d, self.d)

    def f_vvv(self, s, x, m, v):
        self._need_third()
        return _zeros(1, self.d, self.d, self.d)

    def g(self, x, m):
        raise CapabilityError("g")

    def g_x(self, x, m):
        raise CapabilityError("g_x")

    def g_xx(self, x, m):
        raise CapabilityError("g_xx")

    def g_xxx(self, x, m):
        self._need_third()
        return _zeros(1, self.n, self.n, self.n)

    # measure kernels (first order) ---------------------------------------
    def b_mu(self, s, x, m, v, y):
        return _zeros(1, 1, self.n, self.n)

    def sigma0_mu(self, s, m, y):
        """Kernel of sigma0, shape broadcastable to (1, M, n, n_noise, n)."""
        return _zeros(1, 1, self.n, self.n, self.n)

    def bx_mu(self, s, x, m, v, y):
        return _zeros(1, 1, self.n, self.n, self.n)

    def bv_mu(self, s, x, m, v, y):
        return _zeros(1, 1, self.n, self.d, self.n)

    def f_mu(self, s, x, m, v, y):
        return _zeros(1, 1, self.n)

    def fx_mu(self, s, x, m, v, y):
        return _zeros(1, 1, self.n, self.n)

    def fv_mu(self, s, x, m, v, y):
        return _zeros(1, 1, self.d, self.n)

    def g_mu(self, x, m, y):
        return _zeros(1, 1, self.n)

    def gx_mu(self, x, m, y):
        return _zeros(1, 1, self.n, self.n)

    # measure kernels (second order in y) ---------------------------------
    def b_mu_yy(self, s, x, m, v, y):
        return _zeros(1, 1, self.n, self.n, self.n)

    def sigma0_mu_yy(self, s, m, y):
        return _zeros(1, 1, self.n, self.n, self.n, self.n)

    def bx_mu_yy(self, s, x, m, v, y):
        return _zeros(1, 1, self.n, self.n, self.n, self.n)

    def bv_mu_yy(self, s, x, m, v, y):
        return _zeros(1, 1, self.n, self.d, self.n, self.n)

    def f_mu_yy(self, s, x, m, v, y):
        return _zeros(1, 1, self.n, self.n)

    def fx_mu_yy(self, s, x, m, v, y):
        return _zeros(1, 1, self.n, self.n, self.n)

    def fv_mu_yy(self, s, x, m, v, y):
        return _zeros(1, 1, self.d, self.n, self.n)

    def g_mu_yy(self, x, m, y):
        return _zeros(1, 1, self.n, self.n)

    def gx_mu_yy(self, x, m, y):
        return _zeros(1, 1, self.n, self.n, self.n)

    def _need_third(self):
        if not self.has_third_derivatives:
            raise CapabilityError(f"{self.name} does not provide third derivatives")


# --------------------------------------------------------------------------
# built-in family

def _mat(a, n, m=None, name="matrix"):
    m = n if m is None else m
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 0:
        if n != m and arr != 0:
            raise ModelError(f"scalar {name} needs a square shape")
        arr = arr * np.eye(n, m)
    if arr.shape != (n, m):
        raise ModelError(f"{name} has shape {arr.shape}, expected {(n, m)}")
    return arr


def _dtanh(u, order):
    t = np.tanh(u)
    s2 = 1.0 - t * t
    if order == 1:
        return s2
    if order == 2:
        return -2.0 * t * s2
    return s2 * (6.0 * t * t - 2.0)


def _diag3(vals):
    """(N, k) -> (N, k, k, k) with vals on the super-diagonal."""
    N, k = vals.shape
    out = np.zeros((N, k, k, k))
    idx = np.arange(k)
    out[:, idx, idx, idx] = vals
    return out


def _diag4(vals):
    N, k = vals.shape
    out = np.zeros((N, k, k, k, k))
    idx = np.arange(k)
    out[:, idx, idx, idx, idx] = vals
    return out


def _diag2(vals):
    N, k = vals.shape
    out = np.zeros((N, k, k))
    idx = np.arange(k)
    out[:, idx, idx] = vals
    return out


@dataclass
class LQParameters:
    """Parameters of the quadratic family with optional saturating terms.

    ``alpha`` scales ``tanh(x)`` in the drift, ``gamma`` scales
    ``tanh(mean)`` in the drift, ``rho`` scales ``sum log cosh(v)`` in the
    running cost and ``theta`` scales ``sum log cosh(x)`` in the terminal
    cost. All four vanish for the pure linear-quadratic family.
    """

    n: int = 1
    d: int = 1
    A: object = 0.0
    Abar: object = 0.0
    B: object = 1.0
    Qx: object = 1.0
    Qv: object = 1.0
    Qg: object = 1.0
    kappa: float = 0.0
    sigma0: object = 1.0
    sigma1: object = 0.0
    alpha: float = 0.0
    gamma: float = 0.0
    rho: float = 0.0
    theta: float = 0.0

    def arrays(self):
        n, d = self.n, self.d
        s1 = np.asarray(self.sigma1, dtype=np.float64)
        if s1.ndim == 0:
            if n > 1 and float(s1) != 0:
                raise ModelError("scalar sigma1 is only accepted in one dimension")
            s1 = np.full((n, n, n), float(s1))
        elif s1.shape == (1, 1) and n == 1:
            s1 = s1[None]
        if s1.shape != (n, n, n):
            raise ModelError(f"sigma1 has shape {s1.shape}, expected {(n, n, n)}")
        return dict(
            A=_mat(self.A, n, name="A"), Abar=_mat(self.Abar, n, name="Abar"),
            B=_mat(self.B, n, d, name="B"), Qx=_mat(self.Qx, n, name="Qx"),
            Qv=_mat(self.Qv, d, name="Qv"), Qg=_mat(self.Qg, n, name="Qg"),
            sigma0=_mat(self.sigma0, n, name="sigma0"), sigma1=s1,
        )

    def to_dict(self):
        out = {}
        for k, v in asdict(self).items():
            out[k] = np.asarray(v).tolist()
        return out


class QuadraticModel(CoefficientModel):
    """Linear drift, quadratic costs, optional saturating perturbations.

    ``b = A x + Abar mean(m) + B v + alpha tanh(x) + gamma tanh(mean(m))``,
    ``f = x'Qx x/2 + v'Qv v/2 + kappa |x - mean(m)|^2/2 + rho sum log cosh(v)``,
    ``g = x'Qg x/2 + theta sum log cosh(x)``,
    ``sigma^j(x) = sigma0[:, j] + sigma1[j] x``.
    """

    has_third_derivatives = True

    def __init__(self, params, constants=None, name="lq"):
        self.params = params
        arr = params.arrays()
        self.n, self.d = params.n, params.d
        self.A, self.Abar, self.B = arr["A"], arr["Abar"], arr["B"]
        self.Qx, self.Qv, self.Qg = arr["Qx"], arr["Qv"], arr["Qg"]
        self._s0, self._s1 = arr["sigma0"], arr["sigma1"]
        self.kappa = float(params.kappa)
        self.alpha, self.gamma = float(params.alpha), float(params.gamma)
        self.rho, self.theta = float(params.rho), float(params.theta)
        self.has_mean_field = bool(np.any(self.Abar != 0) or self.kappa != 0 or self.gamma != 0)
        self.constants = constants
        self.name = name

    # helpers
    def _mean(self, m):
        return np.asarray(m.mean, dtype=np.float64)

    def b(self, s, x, m, v):
        mb = self._mean(m)
        out = x @ self.A.T + v @ self.B.T + (self.Abar @ mb)[None]
        if self.alpha:
            out = out + self.alpha * np.tanh(x)
        if self.gamma:
            out = out + self.gamma * np.tanh(mb)[None]
        return out

    def b_x(self, s, x, m, v):
        out = np.broadcast_to(self.A, (x.shape[0], self.n, self.n)).copy()
        if self.alpha:
            out += self.alpha * _diag2(_dtanh(x, 1))
        return out

    def b_v(self, s, x, m, v):
        return np.broadcast_to(self.B, (x.shape[0], self.n, self.d))

    def b_xx(self, s, x, m, v):
        if not self.alpha:
            return _zeros(1, self.n, self.n, self.n)
        return self.alpha * _diag3(_dtanh(x, 2))

    def b_xxx(self, s, x, m, v):
        if not self.alpha:
            return _zeros(1, self.n, self.n, self.n, self.n)
        return self.alpha * _diag4(_dtanh(x, 3))

    def sigma0(self, s, m):
        return self._s0

    def sigma1(self, s):
        return self._s1

    def f(self, s, x, m, v):
        mb = self._mean(m)
        out = 0.5 * np.einsum("ia,ab,ib->i", x, self.Qx, x) + 0.5 * np.einsum("ia,ab,ib->i", v, self.Qv, v)
        if self.kappa:
            out = out + 0.5 * self.kappa * np.sum((x - mb) ** 2, axis=1)
        if self.rho:
            out = out + self.rho * np.sum(np.log(np.cosh(v)), axis=1)
        return out

    def f_x(self, s, x, m, v):
        out = x @ self.Qx.T
        if self.kappa:
            out = out + self.kappa * (x - self._mean(m))
        return out

    def f_v(self, s, x, m, v):
        out = v @ self.Qv.T
        if self.rho:
            out = out + self.rho * np.tanh(v)
        return out

    def f_xx(self, s, x, m, v):
        return (self.Qx + self.kappa * np.eye(self.n))[None]

    def f_vv(self, s, x, m, v):
        if not self.rho:
            return self.Qv[None]
        return self.Qv[None] + self.rho * _diag2(_dtanh(v, 1))

    def f_vvv(self, s, x, m, v):
        if not self.rho:
            return _zeros(1, self.d, self.d, self.d)
        return self.rho * _diag3(_dtanh(v, 2))

    def g(self, x, m):
        out = 0.5 * np.einsum("ia,ab,ib->i", x, self.Qg, x)
        if self.theta:
            out = out + self.theta * np.sum(np.log(np.cosh(x)), axis=1)
        return out

    def g_x(self, x, m):
        out = x @ self.Qg.T
        if self.theta:
            out = out + self.theta * np.tanh(x)
        return out

    def g_xx(self, x, m):
        if not self.theta:
            return self.Qg[None]
        return self.Qg[None] + self.theta * _diag2(_dtanh(x, 1))

    def g_xxx(self, x, m):
        if not self.theta:
            return _zeros(1, self.n, self.n, self.n)
        return self.theta * _diag3(_dtanh(x, 2))

    # mean-field kernels: the drift depends on the mean, so its flat
    # derivative is linear in y and the y-gradient is constant
    def b_mu(self, s, x, m, v, y):
        k = self.Abar.copy()
        if self.gamma:
            k = k + self.gamma * np.diag(_dtanh(self._mean(m), 1))
        return k[None, None]

    def f_mu(self, s, x, m, v, y):
        if not self.kappa:
            return _zeros(1, 1, self.n)
        return (-self.kappa * (x - self._mean(m)))[:, None, :]

    def fx_mu(self, s, x, m, v, y):
        return (-self.kappa * np.eye(self.n))[None, None]


def _spd_check(Q, name):
    Q = np.asarray(Q)
    if not np.allclose(Q, Q.T):
        raise ModelError(f"{name} must be symmetric")
    return float(np.linalg.eigvalsh(0.5 * (Q + Q.T)).min())


def _opnorm(a):
    return float(np.linalg.norm(np.atleast_2d(a), 2))


def _lq_constants(model):
    """Constants of the pure quadratic family in closed form."""
    n = model.n
    lam_v = 0.5 * _spd_check(model.Qv, "Qv")
    lam_x = 0.5 * _spd_check(model.Qx, "Qx")
    lam_g = 0.5 * _spd_check(model.Qg, "Qg")
    BBt = model.B @ model.B.T
    lam_b = float(np.linalg.eigvalsh(BBt).min()) if model.d >= n else 0.0
    l_bm = _opnorm(model.Abar) + abs(model.gamma)
    s1n = max(_opnorm(model._s1[j]) for j in range(n))
    L_f0 = model.kappa
    L = max(_opnorm(model.A) + abs(model.alpha), _opnorm(model.B), l_bm, s1n, L_f0)
    return dict(L=L, lambda_b=max(lam_b, 0.0), lambda_v=max(lam_v, 0.0), lambda_x=max(lam_x, 0.0),
                lambda_g=max(lam_g, 0.0), l_b_m=l_bm, l_sigma_m=0.0, L_b0=0.0, L_b1=0.0, L_b2=0.0,
                L_f0=L_f0, L_f1=0.0, L_g=0.0, n=n)


def build_lq_model(params=None, **kwargs):
    """Linear-quadratic model with analytic derivatives and declared constants.

    Parameters
    ----------
    params : LQParameters, optional
        Keyword arguments are forwarded to :class:`LQParameters` when omitted.

    Returns
    -------
    QuadraticModel
    """
    if params is None:
        params = LQParameters(**kwargs)
    for k in ("alpha", "gamma", "rho", "theta"):
        if getattr(params, k):
            raise ModelError(f"{k} must vanish for the linear-quadratic family")
    model = QuadraticModel(params, name="lq")
    if _spd_check(model.Qv, "Qv") <= 0:
        raise ModelError("Qv must be positive definite")
    c = _lq_constants(model)
    if c["lambda_b"] > 0 and model.d < model.n:
        raise ModelError("a positive lambda_b needs d >= n")
    model.constants = AssumptionConstants(**c)
    return model


# probe box used to declare and audit bounds of the saturating terms
PROBE_BOX = 4.0


def _probe_points(rng, n, d, count, box=PROBE_BOX):
    x = rng.uniform(-box, box, (count, n))
    v = rng.uniform(-box, box, (count, d))
    v *= np.minimum(1.0, box / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300))
    return x, v


def _random_cloud(rng, n, size=64, box=PROBE_BOX):
    center = rng.uniform(-0.5 * box, 0.5 * box, n)
    scale = rng.uniform(0.1, 0.5 * box / np.sqrt(n))
    pts = center + scale * rng.standard_normal((size, n))
    m2 = np.mean(np.sum(pts ** 2, axis=1))
    if m2 > box ** 2:
        pts *= box / np.sqrt(m2)
    return EmpiricalMeasure(pts)


def _curvature_bound_x(alpha, n, box=PROBE_BOX):
    """Bound on |alpha D^2 tanh(x)| (1 + |x| + |v| + W2) over the probe box.

    The second derivative is diagonal with entries at most 4/(3 sqrt 3) in
    size, |x| <= sqrt(n) box, and |v|, W2 <= box.
    """
    hmax = 4.0 / (3.0 * np.sqrt(3.0))
    return float(abs(alpha) * np.sqrt(n) * hmax * (1.0 + np.sqrt(n) * box + 2.0 * box))


DEMO_DEFAULTS = dict(n=1, d=1, A=0.0, Abar=0.05, B=1.0, Qx=2.0, Qv=2.0, Qg=1.0, kappa=0.1,
                     sigma0=0.5, sigma1=0.0, alpha=0.05, gamma=0.05, rho=0.5, theta=0.5)


def build_nonlinear_demo(params=None, constants=None, audit=True, seed=0, **kwargs):
    """Quadratic model with saturating drift and cost perturbations.

    Returns the model and its declared constants. The curvature bound of
    the drift is declared over the probe box ``|x_i|, |v|, W2 <= 4`` and
    audited by random probing.

    Returns
    -------
    (QuadraticModel, AssumptionConstants)
    """
    if params is None:
        params = LQParameters(**{**DEMO_DEFAULTS, **kwargs})
    if params.rho < 0 or params.theta < 0:
        raise ModelError("rho and theta must be nonnegative to keep the costs convex")
    model = QuadraticModel(params, name="nonlinear_demo")
    if _spd_check(model.Qv, "Qv") <= 0:
        raise ModelError("Qv must be positive definite")
    c = _lq_constants(model)
    c["L_b0"] = _curvature_bound_x(model.alpha, model.n)
    c["L"] = max(c["L"], c["L_b0"])
    declared = AssumptionConstants(**c) if constants is None else constants
    model.constants = declared
    if audit:
        audit_constants(model, declared, np.random.default_rng(seed))
    return model, declared


def model_from_spec(spec):
    """Build a model from ``{"family": ..., "params": {...}}``."""
    family = spec.get("family")
    params = dict(spec.get("params", {}))
    if family == "lq":
        return build_lq_model(LQParameters(**params))
    if family in ("nonlinear_demo", "nonlinear"):
        return build_nonlinear_demo(LQParameters(**{**DEMO_DEFAULTS, **params}))[0]
    raise ModelError(f"unknown model family {family!r}")


# --------------------------------------------------------------------------
# probes

def _rel(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(b)), np.max(np.abs(a)), 1.0)
    return float(np.max(np.abs(a - b)) / scale) if a.size else 0.0


def _full(arr, N, shape):
    return np.broadcast_to(np.asarray(arr, dtype=np.float64), (N,) + shape)


def check_derivatives(model, rng=None, probes=10, h=1e-5, box=2.0):
    """Compare every analytic callback with centered finite differences.

    Returns
    -------
    dict
        Maximum relative error per callback name.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n, d = model.n, model.d
    s = 0.0
    errs = {}
    x, v = _probe_points(rng, n, d, probes, box)
    m = _random_cloud(rng, n, size=16, box=box)

    def fd_x(fun, x, v, shape):
        out = np.zeros((probes,) + shape + (n,))
        for c in range(n):
            e = np.zeros(n)
            e[c] = h
            out[..., c] = (fun(x + e, v) - fun(x - e, v)) / (2 * h)
        return out

    def fd_v(fun, x, v, shape):
        out = np.zeros((probes,) + shape + (d,))
        for c in range(d):
            e = np.zeros(d)
            e[c] = h
            out[..., c] = (fun(x, v + e) - fun(x, v - e)) / (2 * h)
        return out

    def full(fun, shape):
        return lambda xx, vv: _full(fun(s, xx, m, vv), probes, shape)

    b = full(model.b, (n,))
    bx = full(model.b_x, (n, n))
    bv = full(model.b_v, (n, d))
    errs["b_x"] = _rel(bx(x, v), fd_x(b, x, v, (n,)))
    errs["b_v"] = _rel(bv(x, v), fd_v(b, x, v, (n,)))
    errs["b_xx"] = _rel(_full(model.b_xx(s, x, m, v), probes, (n, n, n)), fd_x(bx, x, v, (n, n)))
    errs["b_xv"] = _rel(_full(model.b_xv(s, x, m, v), probes, (n, n, d)), fd_v(bx, x, v, (n, n)))
    errs["b_vv"] = _rel(_full(model.b_vv(s, x, m, v), probes, (n, d, d)), fd_v(bv, x, v, (n, d)))
    f = full(model.f, ())
    fx = full(model.f_x, (n,))
    fv = full(model.f_v, (d,))
    errs["f_x"] = _rel(fx(x, v), fd_x(f, x, v, ()))
    errs["f_v"] = _rel(fv(x, v), fd_v(f, x, v, ()))
    errs["f_xx"] = _rel(_full(model.f_xx(s, x, m, v), probes, (n, n)), fd_x(fx, x, v, (n,)))
    errs["f_xv"] = _rel(_full(model.f_xv(s, x, m, v), probes, (n, d)), fd_v(fx, x, v, (n,)))
    errs["f_vv"] = _rel(_full(model.f_vv(s, x, m, v), probes, (d, d)), fd_v(fv, x, v, (d,)))
    g = lambda xx, vv: _full(model.g(xx, m), probes, ())
    gx = lambda xx, vv: _full(model.g_x(xx, m), probes, (n,))
    gxx = lambda xx, vv: _full(model.g_xx(xx, m), probes, (n, n))
    errs["g_x"] = _rel(gx(x, v), fd_x(g, x, v, ()))
    errs["g_xx"] = _rel(gxx(x, v), fd_x(gx, x, v, (n,)))
    if model.has_third_derivatives:
        bxx = full(model.b_xx, (n, n, n))
        bxv = full(model.b_xv, (n, n, d))
        bvv = full(model.b_vv, (n, d, d))
        errs["b_xxx"] = _rel(_full(model.b_xxx(s, x, m, v), probes, (n, n, n, n)), fd_x(bxx, x, v, (n, n, n)))
        errs["b_xxv"] = _rel(_full(model.b_xxv(s, x, m, v), probes, (n, n, n, d)), fd_v(bxx, x, v, (n, n, n)))
        errs["b_xvv"] = _rel(_full(model.b_xvv(s, x, m, v), probes, (n, n, d, d)), fd_v(bxv, x, v, (n, n, d)))
        errs["b_vvv"] = _rel(_full(model.b_vvv(s, x, m, v), probes, (n, d, d, d)), fd_v(bvv, x, v, (n, d, d)))
        fxx = full(model.f_xx, (n, n))
        fxv = full(model.f_xv, (n, d))
        fvv = full(model.f_vv, (d, d))
        errs["f_xxx"] = _rel(_full(model.f_xxx(s, x, m, v), probes, (n, n, n)), fd_x(fxx, x, v, (n, n)))
        errs["f_xxv"] = _rel(_full(model.f_xxv(s, x, m, v), probes, (n, n, d)), fd_v(fxx, x, v, (n, n)))
        errs["f_xvv"] = _rel(_full(model.f_xvv(s, x, m, v), probes, (n, d, d)), fd_v(fxv, x, v, (n, d)))
        errs["f_vvv"] = _rel(_full(model.f_vvv(s, x, m, v), probes, (d, d, d)), fd_v(fvv, x, v, (d, d)))
        errs["g_xxx"] = _rel(_full(model.g_xxx(x, m), probes, (n, n, n)), fd_x(gxx, x, v, (n, n)))
    errs.update(check_measure_derivatives(model, rng, h=h, box=box))
    return errs


def check_measure_derivatives(model, rng=None, h=1e-5, box=2.0, size=12):
    """Compare measure kernels with finite differences of lifted functionals.

    For a functional ``F(m)`` with kernel ``k(y) = D_y dF/dnu(m)(y)``, moving
    the cloud ``Y`` to ``Y + eps Z`` changes ``F`` at rate
    ``mean_j k(y_j) . z_j``. Second kernels are checked by differencing the
    first kernel in ``y``.
    """
    rng = np.random.default_rng(1) if rng is None else rng
    n, d = model.n, model.d
    s = 0.0
    x, v = _probe_points(rng, n, d, 3, box)
    ypts = _random_cloud(rng, n, size=size, box=box).particles.copy()
    Z = rng.standard_normal(ypts.shape)
    errs = {}

    def lifted(fun):
        def at(eps):
            return np.asarray(fun(EmpiricalMeasure(ypts + eps * Z)), dtype=np.float64)
        return (at(h) - at(-h)) / (2 * h)

    def contract(kern, shape):
        m = EmpiricalMeasure(ypts)
        k = np.broadcast_to(np.asarray(kern(m, ypts), dtype=np.float64), (3, size) + shape + (n,))
        return np.einsum("ij...e,je->i...", k, Z) / size

    base = {
        "b_mu": (lambda mm: model.b(s, x, mm, v), lambda mm, y: model.b_mu(s, x, mm, v, y), (n,)),
        "bx_mu": (lambda mm: _full(model.b_x(s, x, mm, v), 3, (n, n)), lambda mm, y: model.bx_mu(s, x, mm, v, y), (n, n)),
        "bv_mu": (lambda mm: _full(model.b_v(s, x, mm, v), 3, (n, d)), lambda mm, y: model.bv_mu(s, x, mm, v, y), (n, d)),
        "f_mu": (lambda mm: model.f(s, x, mm, v), lambda mm, y: model.f_mu(s, x, mm, v, y), ()),
        "fx_mu": (lambda mm: model.f_x(s, x, mm, v), lambda mm, y: model.fx_mu(s, x, mm, v, y), (n,)),
        "fv_mu": (lambda mm: model.f_v(s, x, mm, v), lambda mm, y: model.fv_mu(s, x, mm, v, y), (d,)),
        "g_mu": (lambda mm: model.g(x, mm), lambda mm, y: model.g_mu(x, mm, y), ()),
        "gx_mu": (lambda mm: model.g_x(x, mm), lambda mm, y: model.gx_mu(x, mm, y), (n,)),
    }
    for name, (fun, kern, shape) in base.items():
        errs[name] = _rel(contract(kern, shape), lifted(fun))
    s0 = lambda mm: np.asarray(model.sigma0(s, mm), dtype=np.float64)[None]
    s0k = lambda mm, y: np.asarray(model.sigma0_mu(s, mm, y))
    m0 = EmpiricalMeasure(ypts)
    k = np.broadcast_to(s0k(m0, ypts), (1, size, n, n, n))
    errs["sigma0_mu"] = _rel(np.einsum("ijabe,je->iab", k, Z) / size,
                             (s0(EmpiricalMeasure(ypts + h * Z)) - s0(EmpiricalMeasure(ypts - h * Z))) / (2 * h))

    second = {
        "b_mu_yy": (lambda y: model.b_mu(s, x, m0, v, y), lambda y: model.b_mu_yy(s, x, m0, v, y), (n, n)),
        "bx_mu_yy": (lambda y: model.bx_mu(s, x, m0, v, y), lambda y: model.bx_mu_yy(s, x, m0, v, y), (n, n, n)),
        "bv_mu_yy": (lambda y: model.bv_mu(s, x, m0, v, y), lambda y: model.bv_mu_yy(s, x, m0, v, y), (n, d, n)),
        "f_mu_yy": (lambda y: model.f_mu(s, x, m0, v, y), lambda y: model.f_mu_yy(s, x, m0, v, y), (n,)),
        "fx_mu_yy": (lambda y: model.fx_mu(s, x, m0, v, y), lambda y: model.fx_mu_yy(s, x, m0, v, y), (n, n)),
        "fv_mu_yy": (lambda y: model.fv_mu(s, x, m0, v, y), lambda y: model.fv_mu_yy(s, x, m0, v, y), (d, n)),
        "g_mu_yy": (lambda y: model.g_mu(x, m0, y), lambda y: model.g_mu_yy(x, m0, y), (n,)),
        "gx_mu_yy": (lambda y: model.gx_mu(x, m0, y), lambda y: model.gx_mu_yy(x, m0, y), (n, n)),
        "sigma0_mu_yy": (lambda y: model.sigma0_mu(s, m0, y), lambda y: model.sigma0_mu_yy(s, m0, y), (n, n, n)),
    }
    for name, (k1, k2, shape) in second.items():
        lead = 1 if name.startswith("sigma0") else 3
        fd = np.zeros((lead, size) + shape + (n,))
        for c in range(n):
            e = np.zeros(n)
            e[c] = h
            up = np.broadcast_to(np.asarray(k1(ypts + e)), (lead, size) + shape)
            dn = np.broadcast_to(np.asarray(k1(ypts - e)), (lead, size) + shape)
            fd[..., c] = (up - dn) / (2 * h)
        an = np.broadcast_to(np.asarray(k2(ypts)), (lead, size) + shape + (n,))
        errs[name] = _rel(an, fd)
    return errs


def check_sigma_affine(model, rng=None, probes=10):
    """Max deviation of ``sigma(x) - sigma(0)`` from the declared slope."""
    rng = np.random.default_rng(2) if rng is None else rng
    x, _ = _probe_points(rng, model.n, model.d, probes)
    m = _random_cloud(rng, model.n)
    diff = model.sigma(0.0, x, m) - model.sigma(0.0, np.zeros_like(x), m)
    slope = np.einsum("jac,ic->iaj", np.asarray(model.sigma1(0.0)), x)
    return float(np.max(np.abs(diff - slope)))


def _fro(a, axes):
    return np.sqrt(np.sum(np.asarray(a) ** 2, axis=axes))


def audit_constants(model, consts, rng=None, probes=400, box=PROBE_BOX, raise_on_violation=True):
    """Check the declared constants against random probes.

    Returns
    -------
    dict
        Observed maxima (or minima for the convexity constants) by name.
    """
    rng = np.random.default_rng(3) if rng is None else rng
    n, d = model.n, model.d
    s = 0.0
    obs = {}
    worst = {k: 0.0 for k in ("L_b0", "L_b1", "L_b2", "l_b_m", "l_sigma_m", "L_f0", "L_f1", "L_g", "Db")}
    lam_b = np.inf
    for _ in range(max(1, probes // 50)):
        x, v = _probe_points(rng, n, d, 50, box)
        m = _random_cloud(rng, n, box=box)
        y = m.particles[:8]
        w = 1.0 + np.linalg.norm(x, axis=1) + np.linalg.norm(v, axis=1) + np.sqrt(m.second_moment)

        def mx(a, nd):
            a = np.asarray(a, dtype=np.float64)
            return _fro(a.reshape(a.shape[:nd] + (-1,)), -1)

        bxx = np.broadcast_to(mx(model.b_xx(s, x, m, v), 1), (50,))
        bxm = np.broadcast_to(mx(model.bx_mu(s, x, m, v, y), 2).max(axis=1), (50,))
        worst["L_b0"] = max(worst["L_b0"], float(np.max(np.maximum(bxx, bxm) * w)))
        bxv = np.broadcast_to(mx(model.b_xv(s, x, m, v), 1), (50,))
        bvm = np.broadcast_to(mx(model.bv_mu(s, x, m, v, y), 2).max(axis=1), (50,))
        worst["L_b1"] = max(worst["L_b1"], float(np.max(np.maximum(bxv, bvm) * w)))
        bvv = np.broadcast_to(mx(model.b_vv(s, x, m, v), 1), (50,))
        worst["L_b2"] = max(worst["L_b2"], float(np.max(bvv * w)))
        worst["l_b_m"] = max(worst["l_b_m"], float(np.max(np.linalg.norm(
            np.broadcast_to(model.b_mu(s, x, m, v, y), (50, 8, n, n)), ord=2, axis=(2, 3)))))
        s0m = np.broadcast_to(model.sigma0_mu(s, m, y), (1, 8, n, n, n))
        worst["l_sigma_m"] = max(worst["l_sigma_m"], float(np.max(_fro(s0m, (2, 3, 4)))))
        worst["L_f0"] = max(worst["L_f0"], float(np.max(np.linalg.norm(
            np.broadcast_to(model.fx_mu(s, x, m, v, y), (50, 8, n, n)), ord=2, axis=(2, 3)))))
        worst["L_f1"] = max(worst["L_f1"], float(np.max(np.linalg.norm(
            np.broadcast_to(model.fv_mu(s, x, m, v, y), (50, 8, d, n)), ord=2, axis=(2, 3)))))
        worst["L_g"] = max(worst["L_g"], float(np.max(np.linalg.norm(
            np.broadcast_to(model.gx_mu(x, m, y), (50, 8, n, n)), ord=2, axis=(2, 3)))))
        Db = max(float(np.max(np.linalg.norm(np.broadcast_to(model.b_x(s, x, m, v), (50, n, n)), ord=2, axis=(1, 2)))),
                 float(np.max(np.linalg.norm(np.broadcast_to(model.b_v(s, x, m, v), (50, n, d)), ord=2, axis=(1, 2)))))
        worst["Db"] = max(worst["Db"], Db)
        bv = np.broadcast_to(model.b_v(s, x, m, v), (50, n, d))
        lam_b = min(lam_b, float(np.min(np.linalg.eigvalsh(bv @ np.swapaxes(bv, 1, 2)))))
    obs.update(worst)
    obs["lambda_b"] = lam_b
    obs.update(convexity_probe(model, rng, box=box))
    obs["sigma_affine"] = check_sigma_affine(model, rng)
    if raise_on_violation:
        tol = 1e-9
        for name in ("L_b0", "L_b1", "L_b2", "l_b_m", "l_sigma_m", "L_f0", "L_f1", "L_g"):
            if obs[name] > getattr(consts, name) * (1 + tol) + tol:
                raise ModelError(f"probe violates {name}: observed {obs[name]:.6g} > declared {getattr(consts, name):.6g}")
        if obs["Db"] > consts.L * (1 + tol) + tol:
            raise ModelError(f"probe violates L: drift derivative {obs['Db']:.6g} > {consts.L:.6g}")
        if consts.lambda_b > 0 and lam_b < consts.lambda_b * (1 - tol) - tol:
            raise ModelError(f"probe violates lambda_b: {lam_b:.6g} < {consts.lambda_b:.6g}")
        for name in ("lambda_v", "lambda_x", "lambda_g"):
            if obs[name] < getattr(consts, name) * (1 - 1e-7) - 1e-9:
                raise ModelError(f"probe violates {name}: {obs[name]:.6g} < {getattr(consts, name):.6g}")
        if obs["sigma_affine"] > 1e-10:
            raise ModelError("diffusion is not affine in the state")
    return obs


def convexity_probe(model, rng=None, probes=200, box=PROBE_BOX):
    """Smallest observed quadratic lower-bound ratios of ``f`` and ``g``.

    For pairs of points the ratio
    ``(f(z') - f(z) - Df(z).(z' - z)) / |z' - z|^2`` is computed separately
    for moves in ``v`` (reported as lambda_v) and in ``x`` (lambda_x), and
    likewise for ``g``.
    """
    rng = np.random.default_rng(4) if rng is None else rng
    n, d = model.n, model.d
    s = 0.0
    x, v = _probe_points(rng, n, d, probes, box)
    m = _random_cloud(rng, n, box=box)
    dx = rng.standard_normal((probes, n)) * rng.uniform(0.01, 2.0, (probes, 1))
    dv = rng.standard_normal((probes, d)) * rng.uniform(0.01, 2.0, (probes, 1))
    f0 = model.f(s, x, m, v)
    fx = np.broadcast_to(model.f_x(s, x, m, v), (probes, n))
    fv = np.broadcast_to(model.f_v(s, x, m, v), (probes, d))
    rv = (model.f(s, x, m, v + dv) - f0 - np.sum(fv * dv, axis=1)) / np.sum(dv ** 2, axis=1)
    rx = (model.f(s, x + dx, m, v) - f0 - np.sum(fx * dx, axis=1)) / np.sum(dx ** 2, axis=1)
    g0 = model.g(x, m)
    gx = np.broadcast_to(model.g_x(x, m), (probes, n))
    rg = (model.g(x + dx, m) - g0 - np.sum(gx * dx, axis=1)) / np.sum(dx ** 2, axis=1)
    return {"lambda_v": float(rv.min()), "lambda_x": float(rx.min()), "lambda_g": float(rg.min())}
