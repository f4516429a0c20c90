"""Linear Jacobian, Hessian and kernel flows along a converged solution.

Every flow is a linear forward-backward system whose coefficients are frozen
along a base trajectory ``Theta = (X, P, Q, v)``. With

* ``M = D_v^2 L`` (control curvature), ``W = sum_a P_a D_x D_v b_a + D_x D_v f``,
* ``H = sum_a P_a D_x^2 b_a + D_x^2 f``,

and source terms ``(Sb, Ssig, Sc, Sp, Sg)`` collecting inhomogeneities, a
flow ``(Z, Y, Zq, U)`` satisfies

* ``Z(k+1) = Z + (D_x b Z + D_v b U + Sb) dt + sum_j (sigma1_j Z + Ssig_j) dB_j``,
* ``0 = M U + W' Z + D_v b' Y + Sc``,
* ``Y(k) = E_k[Y(k+1)] + dt (D_x b' Y + H Z + W U + sum_j sigma1_j' Zq_j + Sp)``,
* ``Y(K) = D_x^2 g Z(K) + Sg``.

The discretization mirrors the base solver: explicit forward steps, an
adjoint step implicit in ``Y`` and joint martingale regression on the base
design for the conditional expectations. Flows are decoupled as
``Y = G Z + h`` (see ``Scheme``), which keeps the regressions well posed when
a flow barely varies across particles.
"""
from dataclasses import dataclass, field
import csv
import os

import numpy as np

from . import _small
from ._regression import Projection, noise_design
from .fbsde import (_full, adjoint_jacobian, control_curvature, cross_curvature, propagate,
                    state_curvature)
from .measures import IndependentCopyContext, lex_order
from .model import CapabilityError

FLOW_TOL = 1e-12
FLOW_MAX = 200
STALL_TOL = 1e-9
COMPANIONS = 512


class FlowError(RuntimeError):
    """A linear flow could not be solved."""

    def __init__(self, message, node=None, particle=None):
        super().__init__(message)
        self.node = node
        self.particle = particle


# --------------------------------------------------------------------------
# frozen coefficients


@dataclass
class NodeCoefficients:
    bx: np.ndarray
    bv: np.ndarray
    M: np.ndarray
    W: np.ndarray
    Ax: np.ndarray      # H - W M^{-1} W'
    Jm: np.ndarray      # implicit adjoint Jacobian
    MinvW: np.ndarray   # M^{-1} W'
    Minvbv: np.ndarray  # M^{-1} D_v b'
    sig1: np.ndarray
    gxx: np.ndarray = None


class Linearization:
    """Coefficients of the linearized system along a trajectory, per node.

    Parameters
    ----------
    model : CoefficientModel
    grid : TimeGrid
    X, P : ndarray, shape (K+1, N, n)
    v : ndarray, shape (K+1, N, d)
    flow : list of EmpiricalMeasure
    cache : bool
        Keep computed nodes; flows iterate over the same nodes many times.
    """

    def __init__(self, model, grid, X, P, v, flow, cache=True):
        self.model, self.grid = model, grid
        self.X, self.P, self.v, self.flow = X, P, v, flow
        self.cache = {} if cache else None

    @property
    def N(self):
        return self.X.shape[1]

    def node(self, k):
        if self.cache is not None and k in self.cache:
            return self.cache[k]
        md, g = self.model, self.grid
        s, x, v, p, m = g.nodes[k], self.X[k], self.v[k], self.P[k], self.flow[k]
        N, n, d = x.shape[0], md.n, md.d
        bx = _full(md.b_x(s, x, m, v), N, (n, n))
        bv = _full(md.b_v(s, x, m, v), N, (n, d))
        M = control_curvature(md, s, x, m, v, p)
        M = 0.5 * (M + np.swapaxes(M, 1, 2))
        W = cross_curvature(md, s, x, m, v, p)
        H = state_curvature(md, s, x, m, v, p)
        MinvW = _small.solve(M, np.swapaxes(W, 1, 2))
        Minvbv = _small.solve(M, np.swapaxes(bv, 1, 2))
        Ax = H - W @ MinvW
        Jm = adjoint_jacobian(md, s, x, m, v, p, g.dt)
        sig1 = np.asarray(md.sigma1(s), dtype=np.float64)
        gxx = _full(md.g_xx(x, m), N, (n, n)) if k == g.K else None
        out = NodeCoefficients(bx, bv, M, W, Ax, Jm, MinvW, Minvbv, sig1, gxx)
        if self.cache is not None:
            self.cache[k] = out
        return out


def linearization(sol):
    """Cached linearization of a solver output."""
    lin = sol.cache.get("linearization")
    if lin is None:
        lin = Linearization(sol.model, sol.grid, sol.X, sol.P, sol.v, sol.measure_flow)
        sol.cache["linearization"] = lin
    return lin


def copy_context(sol, k):
    """Independent-copy context over the cloud ``X(k)`` of a solution."""
    ctxs = sol.cache.setdefault("copy_contexts", {})
    if k not in ctxs:
        ctxs[k] = IndependentCopyContext(sol.X[k], stride=sol.config.stride)
    return ctxs[k]


# --------------------------------------------------------------------------
# measure-kernel contractions


class KernelSet:
    """Measure-derivative kernels evaluated at a set of target particles.

    ``contract(ctx, Z)`` returns the source terms produced by independent
    copies at ``ctx.points`` carrying values ``Z``; ``second=True`` uses the
    second y-derivative kernels, contracted against ``Z`` holding flattened
    outer products.
    """

    def __init__(self, model, s, x, m, v, p):
        self.model, self.s, self.x, self.m, self.v, self.p = model, s, x, m, v, p
        self.N = x.shape[0]

    def _kern(self, name, second):
        md, s, x, m, v, p = self.model, self.s, self.x, self.m, self.v, self.p
        suffix = "_yy" if second else ""
        n = md.n

        def flat(a, lead):
            a = np.asarray(a, dtype=np.float64)
            if second:
                a = a.reshape(a.shape[:lead] + (-1,))
            return a

        if name == "b":
            return lambda r, y: flat(getattr(md, "b_mu" + suffix)(s, x[r], m, v[r], y), 3)
        if name == "sig":
            return lambda r, y: flat(getattr(md, "sigma0_mu" + suffix)(s, m, y), 4)
        if name == "f":
            return lambda r, y: flat(getattr(md, "f_mu" + suffix)(s, x[r], m, v[r], y), 2)
        if name == "g":
            return lambda r, y: flat(getattr(md, "g_mu" + suffix)(x[r], m, y), 2)
        if name == "gx":
            return lambda r, y: flat(getattr(md, "gx_mu" + suffix)(x[r], m, y), 3)
        if name in ("c", "p"):
            fk = getattr(md, ("fv_mu" if name == "c" else "fx_mu") + suffix)
            bk = getattr(md, ("bv_mu" if name == "c" else "bx_mu") + suffix)

            def kern(r, y):
                a = flat(fk(s, x[r], m, v[r], y), 3)
                b = flat(bk(s, x[r], m, v[r], y), 4)
                if np.any(b):
                    pr = p[r]
                    b = np.broadcast_to(b, (pr.shape[0],) + b.shape[1:])
                    a = a + np.einsum("ia,ija...->ij...", pr, b)
                return a
            return kern
        raise KeyError(name)

    def contract(self, name, ctx, Z, second=False):
        """Average of ``kernel(x_i, copy_j) Z_j`` over copies, broadcast to N rows."""
        out = ctx.expect(self._kern(name, second), Z, base_size=self.N)
        return np.broadcast_to(out, (self.N,) + out.shape[1:]).copy()

    def sources(self, ctx, Z, second=False):
        return Sources(self.contract("b", ctx, Z, second), self.contract("sig", ctx, Z, second),
                       self.contract("c", ctx, Z, second), self.contract("p", ctx, Z, second))


def kernels_at(sol, k, rows=None):
    """KernelSet for the particles of ``sol`` at node ``k``."""
    X, P, v = sol.X[k], sol.P[k], sol.v[k]
    if rows is not None:
        X, P, v = X[rows], P[rows], v[rows]
    return KernelSet(sol.model, sol.grid.nodes[k], X, sol.measure_flow[k], v, P)


@dataclass
class Sources:
    """Inhomogeneities of a linear flow at one node (any entry may be None)."""

    b: np.ndarray = None
    sig: np.ndarray = None
    c: np.ndarray = None
    p: np.ndarray = None

    def __add__(self, other):
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b
        return Sources(add(self.b, other.b), add(self.sig, other.sig), add(self.c, other.c), add(self.p, other.p))


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


# --------------------------------------------------------------------------
# the generic linear solver


class LinearProblem:
    """Description of one linear flow system.

    Subclasses provide the initial value and the source terms. A problem is
    ``coupled`` when its sources depend on the flow's own state through
    independent copies; otherwise they are evaluated once with ``Z=None``.
    """

    name = "flow"
    coupled = False

    def initial(self):
        raise NotImplementedError

    def sources(self, k, Z):
        return Sources()

    def terminal(self, Z):
        return None

    def h_weights(self, k):
        """Per-particle factors of the affine part, shape (N, m, q), or None.

        When given, ``h`` is fitted as ``sum_m F_m(X) W[:, m]`` with ``F_m``
        regressed on the base design, for sources that scale with a
        path-dependent state the design does not see.
        """
        return None


@dataclass
class NodeGains:
    """Per-particle decoupling of a linear flow at one node.

    ``A`` and ``Bm`` give the conditional mean of the next state,
    ``A Z + Bm Y + c``; ``Y = G Z + Lhs^{-1} (affine part)``. ``Gbar`` and
    ``Gam`` are the regressed ``E_k[G(k+1)]`` and ``E_k[G(k+1) dB_j] / dt``.
    """

    G: np.ndarray
    A: np.ndarray = None
    Bm: np.ndarray = None
    Lhs: np.ndarray = None
    Gbar: np.ndarray = None
    Gam: np.ndarray = None


def _gains(c, dt, Gbar, Gam):
    n = Gbar.shape[1]
    A = np.eye(n) + dt * (c.bx - c.bv @ c.MinvW)
    Bm = -dt * (c.bv @ c.Minvbv)
    Lhs = c.Jm - Gbar @ Bm
    Zc = Gbar @ A + dt * c.Ax
    for j in range(Gam.shape[1]):
        s1 = c.sig1[j]
        if np.any(s1):
            Lhs = Lhs - dt * (s1.T @ Gam[:, j] @ Bm)
            Zc = Zc + dt * (Gam[:, j] @ s1 + s1.T @ (Gam[:, j] @ A + Gbar @ s1))
    return NodeGains(_small.solve(Lhs, Zc), A, Bm, Lhs, Gbar, Gam)


class Scheme:
    """Discretization shared by all linear flows along one base solution.

    A flow is represented as ``Y(k) = G(k) Z(k) + h(k)``. The gain ``G``
    does not depend on the sources or the initial value and is computed once
    by a backward recursion started at ``D_x^2 g``; the conditional
    expectations ``E_k[G(k+1)]`` and ``E_k[G(k+1) dB]`` come from the base
    regression design ``phi(X(k)) x [1, dB]``. Only the affine part ``h`` is
    regressed per flow, so frozen-measure flows need a single backward and
    forward pass.
    """

    def __init__(self, lin, bases, dB):
        self.lin, self.bases, self.dB = lin, bases, dB
        g = lin.grid
        K, dt = g.K, g.dt
        N, n = lin.X.shape[1], lin.X.shape[2]
        self.w = dB.shape[2]
        self.phi = [bases[k](lin.X[k]) for k in range(K)]
        self.proj = [Projection(noise_design(self.phi[k], dB[:, k])) for k in range(K)]
        self.gcoef = [None] * K
        self._gains = [None] * (K + 1)
        G = lin.node(K).gxx
        self._gains[K] = NodeGains(G)
        for k in range(K - 1, -1, -1):
            coef = self.proj[k].coef(G.reshape(N, n * n))
            self.gcoef[k] = coef
            gn = _gains(lin.node(k), dt, *self.fitted(k, coef, (n, n)))
            if not np.all(np.isfinite(gn.G)):
                raise FlowError(f"flow gain non-finite at node {k}", node=k)
            self._gains[k] = gn
            G = gn.G

    def node(self, k):
        return self.lin.node(k), self._gains[k]

    def basis_values(self, k):
        return self.phi[k]

    def fitted(self, k, coef, shape):
        """Mean and noise blocks of a regression at the particles of node ``k``.

        Returns arrays of shape (N,) + shape and (N, w) + shape.
        """
        phi = self.basis_values(k)
        N, nb = phi.shape
        mean = (phi @ coef[:nb]).reshape((N,) + shape)
        noise = np.stack([(phi @ coef[nb * (j + 1):nb * (j + 2)]).reshape((N,) + shape)
                          for j in range(self.w)], axis=1)
        return mean, noise

    def fitted_weighted(self, k, coef, W, n):
        """``fitted`` for coefficients of a weighted fit (see ``LinearProblem.h_weights``)."""
        phi = self.basis_values(k)
        N, nb = phi.shape
        m = W.shape[1]
        C = coef.reshape(-1, m * n)

        def block(j):
            F = (phi @ C[nb * j:nb * (j + 1)]).reshape(N, m, n)
            return np.einsum("ima,imq->iaq", F, W)

        return block(0), np.stack([block(j + 1) for j in range(self.w)], axis=1)

    def weighted_coef(self, k, h, W):
        """Least-squares coefficients of ``h`` (N, n, q) on ``design x W``."""
        phi = self.basis_values(k)
        D = noise_design(phi, self.dB[:, k])
        N, p = D.shape
        m, q = W.shape[1], W.shape[2]
        E = np.einsum("ip,imq->iqpm", D, W).reshape(N * q, p * m)
        T = np.swapaxes(h, 1, 2).reshape(N * q, -1)
        return Projection(E).coef(T)

    def view(self, lin, dB):
        """The same scheme evaluated along other trajectories (companions)."""
        return _SchemeView(self, lin, dB)


class _SchemeView(Scheme):
    """Gains of a base scheme evaluated at other particles; nothing is cached."""

    def __init__(self, base, lin, dB):
        self.base, self.lin, self.dB, self.bases, self.w = base, lin, dB, base.bases, base.w
        self.gcoef = base.gcoef

    def node(self, k):
        c = self.lin.node(k)
        if k == self.lin.grid.K:
            return c, NodeGains(c.gxx)
        n = self.lin.model.n
        return c, _gains(c, self.lin.grid.dt, *self.fitted(k, self.gcoef[k], (n, n)))

    def basis_values(self, k):
        return self.bases[k](self.lin.X[k])


def scheme(sol):
    """Cached flow scheme of a solver output."""
    out = sol.cache.get("scheme")
    if out is None:
        out = Scheme(linearization(sol), _bases(sol), sol.dB)
        sol.cache["scheme"] = out
    return out


@dataclass
class LinearFlow:
    """Trajectories of one linear flow.

    Arrays carry the flow columns on the last axis: ``X`` and ``P`` have
    shape (K+1, N, n, q), ``v`` (K+1, N, d, q) and ``Q`` (K, N, n, w, q).
    ``fields`` holds the regression coefficients of the affine part per node.
    """

    name: str
    X: np.ndarray
    P: np.ndarray
    v: np.ndarray
    Q: np.ndarray
    fields: list
    sweeps: int = 0
    sweep_history: list = field(default_factory=list)
    condition_residual: float = 0.0

    @property
    def columns(self):
        return self.X.shape[-1]

    def column(self, j):
        return dict(X=self.X[..., j], P=self.P[..., j], v=self.v[..., j], Q=self.Q[..., j])


def _control(c, Z, Y, Sc):
    U = -(np.einsum("idc,icq->idq", c.MinvW, Z) + np.einsum("ida,iaq->idq", c.Minvbv, Y))
    if Sc is not None:
        U = U - _small.solve(c.M, Sc)
    return U


def _condition_residual(c, Z, Y, U, Sc):
    r = np.einsum("ief,ifq->ieq", c.M, U) + np.einsum("ice,icq->ieq", c.W, Z) + np.einsum("iae,iaq->ieq", c.bv, Y)
    if Sc is not None:
        r = r + Sc
    scale = max(np.max(np.abs(np.einsum("ief,ifq->ieq", c.M, U))), np.max(np.abs(Y)), np.max(np.abs(Z)), 1e-300)
    return float(np.max(np.abs(r)) / scale) if r.size else 0.0


def _mm(A, Z):
    return np.einsum("iac,icq->iaq", A, Z)


def _affine(c, gn, dt, src, hbar, hq, shape):
    """Affine part ``h`` of the adjoint and the source part ``c`` of the next mean."""
    cvec = np.zeros(shape)
    inner = np.zeros(shape)
    if src.b is not None:
        cvec = cvec + dt * src.b
    if src.c is not None:
        MinvSc = _small.solve(c.M, src.c)
        cvec = cvec - dt * np.einsum("iae,ieq->iaq", c.bv, MinvSc)
        inner = inner - np.einsum("ice,ieq->icq", c.W, MinvSc)
    if src.p is not None:
        inner = inner + src.p
    rest = _mm(gn.Gbar, cvec) + hbar + dt * inner
    for j in range(gn.Gam.shape[1]):
        ssig = None if src.sig is None else src.sig[:, :, j]
        if ssig is not None:
            rest = rest + dt * _mm(gn.Gam[:, j], ssig)
        s1 = c.sig1[j]
        if np.any(s1):
            zq = _mm(gn.Gam[:, j], cvec) + hq[:, j]
            if ssig is not None:
                zq = zq + _mm(gn.Gbar, ssig)
            rest = rest + dt * np.einsum("ac,iaq->icq", s1, zq)
    return _small.solve(gn.Lhs, rest), cvec


def _h_fit(scheme, k, coef, n, q, W=None):
    N = scheme.lin.X.shape[1]
    if coef is None:
        return np.zeros((N, n, q)), np.zeros((N, scheme.w, n, q))
    if W is not None:
        return scheme.fitted_weighted(k, coef, W, n)
    return scheme.fitted(k, coef, (n, q))


def _as_term(term, shape):
    if term is None:
        return np.zeros(shape)
    return np.broadcast_to(term, shape).copy()


def _forward(scheme, dB, problem, hcoef, srcs=None, term=None):
    """Forward pass with the adjoint given by the decoupling ``Y = G Z + h``.

    Sources are taken from ``srcs``/``term`` when given, otherwise they are
    evaluated along the new path.
    """
    lin = scheme.lin
    g = lin.grid
    K, dt = g.K, g.dt
    Z0 = np.asarray(problem.initial(), dtype=np.float64)
    N, n, q = Z0.shape
    d = lin.model.d
    w = dB.shape[2]
    Z = np.empty((K + 1, N, n, q))
    Y = np.empty((K + 1, N, n, q))
    U = np.empty((K + 1, N, d, q))
    Zq = np.empty((K, N, n, w, q))
    used = []
    Z[0] = Z0
    res = 0.0
    for k in range(K):
        c, gn = scheme.node(k)
        src = srcs[k] if srcs is not None else problem.sources(k, Z[k])
        used.append(src)
        hbar, hq = _h_fit(scheme, k, None if hcoef is None else hcoef[k], n, q, problem.h_weights(k))
        h, cvec = _affine(c, gn, dt, src, hbar, hq, (N, n, q))
        Y[k] = _mm(gn.G, Z[k]) + h
        U[k] = _control(c, Z[k], Y[k], src.c)
        res = max(res, _condition_residual(c, Z[k], Y[k], U[k], src.c))
        mean = _mm(gn.A, Z[k]) + _mm(gn.Bm, Y[k]) + cvec
        nxt = mean.copy()
        for j in range(w):
            vol = np.einsum("ac,icq->iaq", c.sig1[j], Z[k])
            if src.sig is not None:
                vol = vol + src.sig[:, :, j]
            Zq[k, :, :, j] = _mm(gn.Gam[:, j], mean) + _mm(gn.Gbar, vol) + hq[:, j]
            nxt += vol * dB[:, k, j, None, None]
        Z[k + 1] = nxt
        if not np.all(np.isfinite(nxt)):
            raise FlowError(f"{problem.name}: forward state non-finite at node {k + 1}", node=k + 1)
    c, gn = scheme.node(K)
    src = srcs[K] if srcs is not None else problem.sources(K, Z[K])
    used.append(src)
    if srcs is None:
        term = problem.terminal(Z[K])
    term = _as_term(term, (N, n, q))
    Y[K] = _mm(gn.G, Z[K]) + term
    U[K] = _control(c, Z[K], Y[K], src.c)
    res = max(res, _condition_residual(c, Z[K], Y[K], U[K], src.c))
    return Z, Y, U, Zq, used, term, res


def _h_recursion(scheme, srcs, term, n, q, problem=None):
    """Backward regressions of the affine part for fixed sources."""
    lin = scheme.lin
    K, dt = lin.grid.K, lin.grid.dt
    N = lin.X.shape[1]
    h = _as_term(term, (N, n, q))
    coefs = [None] * K
    for k in range(K - 1, -1, -1):
        W = None if problem is None else problem.h_weights(k)
        if W is None:
            coef = scheme.proj[k].coef(h.reshape(N, n * q))
        else:
            coef = scheme.weighted_coef(k, h, W)
        coefs[k] = coef
        hbar, hq = _h_fit(scheme, k, coef, n, q, W)
        c, gn = scheme.node(k)
        h, _ = _affine(c, gn, dt, srcs[k], hbar, hq, (N, n, q))
        if not np.all(np.isfinite(h)):
            raise FlowError(f"adjoint non-finite at node {k}", node=k)
    return coefs


def solve_linear(sch, problem, tol=FLOW_TOL, max_sweeps=FLOW_MAX):
    """Solve a linear flow on a base scheme.

    Uncoupled problems take one backward regression pass and one forward
    pass. Coupled problems alternate the two until the relative sup-norm
    change of ``Y`` is at most ``tol``; a change that stops decreasing below
    ``STALL_TOL`` is accepted as the regression floor.

    Returns
    -------
    LinearFlow
    """
    lin = sch.lin
    Z0 = np.asarray(problem.initial())
    n, q = Z0.shape[1], Z0.shape[2]
    if not problem.coupled:
        srcs = [problem.sources(k, None) for k in range(lin.grid.K + 1)]
        term = problem.terminal(None)
        coefs = _h_recursion(sch, srcs, term, n, q, problem)
        Z, Y, U, Zq, _, _, res = _forward(sch, sch.dB, problem, coefs, srcs, term)
        return LinearFlow(problem.name, Z, Y, U, Zq, coefs, 1, [], res)
    coefs = None
    Y_old = None
    history = []
    for sweep in range(1, max_sweeps + 1):
        Z, Y, U, Zq, srcs, term, res = _forward(sch, sch.dB, problem, coefs)
        if Y_old is not None:
            scale = np.max(np.abs(Y))
            change = np.max(np.abs(Y - Y_old))
            rel = float(change / scale) if scale > 0 else 0.0
            history.append(rel)
            stalled = len(history) > 3 and rel <= STALL_TOL and rel >= 0.5 * history[-4]
            if change == 0 or rel <= tol or stalled:
                return LinearFlow(problem.name, Z, Y, U, Zq, coefs, sweep, history, res)
        Y_old = Y
        coefs = _h_recursion(sch, srcs, term, n, q, problem)
    raise FlowError(f"{problem.name}: sweeps did not settle (last relative change {history[-1]:.3e})")


def propagate_linear(view, problem, fields):
    """Forward-only evaluation of a flow with fitted affine parts (companion particles)."""
    Z, Y, U, Zq, _, _, res = _forward(view, view.dB, problem, fields)
    return LinearFlow(problem.name, Z, Y, U, Zq, fields, 0, [], res)


def _bases(sol):
    return [f.basis for f in sol.fields]


# --------------------------------------------------------------------------
# concrete systems


class _JacobianProblem(LinearProblem):
    """Derivative in the initial state: starts at the identity, no copy terms."""

    name = "jacobian_x"

    def __init__(self, N, n):
        self.N, self.n = N, n

    def initial(self):
        return np.broadcast_to(np.eye(self.n), (self.N, self.n, self.n)).copy()


class _SelfCopyProblem(LinearProblem):
    """Systems whose copy terms come from the flow itself on the base cloud.

    ``offset`` is added to the flow's own state inside the copy terms, and
    ``fixed`` holds extra copy-term inputs on other clouds.
    """

    def __init__(self, sol, Z0, name, offset=None, fixed=None):
        self.sol = sol
        self.Z0 = Z0
        self.name = name
        self.offset = offset
        self.fixed = fixed
        self.mean_field = sol.model.has_mean_field
        self.coupled = self.mean_field
        self._kern = {}

    def initial(self):
        return self.Z0

    def _ks(self, k):
        if k not in self._kern:
            self._kern[k] = kernels_at(self.sol, k)
        return self._kern[k]

    def _copy_values(self, k, Z):
        return Z if self.offset is None else Z + self.offset[k]

    def sources(self, k, Z):
        out = Sources()
        if not self.mean_field:
            return out
        if k == self.sol.grid.K:
            out = Sources(c=self._ks(k).contract("c", copy_context(self.sol, k), self._copy_values(k, Z)))
        else:
            out = self._ks(k).sources(copy_context(self.sol, k), self._copy_values(k, Z))
        if self.fixed is not None:
            out = out + self.fixed(k)
        return out

    def terminal(self, Z):
        if not self.mean_field:
            return None
        K = self.sol.grid.K
        out = self._ks(K).contract("gx", copy_context(self.sol, K), self._copy_values(K, Z))
        if self.fixed is not None and hasattr(self.fixed, "terminal"):
            out = out + self.fixed.terminal()
        return out


def jacobian_x(base, model=None, tol=FLOW_TOL):
    """Derivative of the solution in the initial state, ``D_x Theta``.

    For an MFG output this is the derivative of the frozen problem at
    ``x = xi``; the measure flow is held fixed.

    Returns
    -------
    LinearFlow
        Columns index the differentiation direction ``e_c``.
    """
    cached = base.cache.get("jacobian_x")
    if cached is not None:
        return cached
    N, n = base.X.shape[1], base.X.shape[2]
    out = solve_linear(scheme(base), _JacobianProblem(N, n), tol)
    base.cache["jacobian_x"] = out
    return out


def _directional(J, eta):
    """``D_x X . eta`` per node: (K+1, N, n, n) x (N, n) -> (K+1, N, n, 1)."""
    return np.einsum("kiac,ic->kia", J, eta)[..., None]


def _check_mfg(base):
    if base.kind != "mfg":
        raise FlowError("this flow needs an equilibrium solution from solve_mfg")


def gateaux_xi(base, model=None, eta=None, tol=FLOW_TOL):
    """Directional derivative of the equilibrium in the initial law along ``eta``.

    Solves the linear McKean-Vlasov system started at ``eta``; copy terms
    are pairwise cloud averages of the flow itself.

    Parameters
    ----------
    base : FBSDESolution
        Output of ``solve_mfg``.
    eta : ndarray, shape (N, n)
    """
    _check_mfg(base)
    eta = np.asarray(eta, dtype=np.float64).reshape(base.X.shape[1:])
    problem = _SelfCopyProblem(base, eta[..., None].copy(), "gateaux_xi")
    return solve_linear(scheme(base), problem, tol)


@dataclass
class Decomposition:
    """Split ``D_eta Theta = (D_x Theta) eta + DD_eta Theta`` with its residual."""

    direct: LinearFlow
    state_part: dict
    measure_part: LinearFlow
    residual: float
    residuals: dict


def decompose_gateaux(base, model=None, eta=None, tol=FLOW_TOL):
    """Solve the zero-initial system for the measure part and check the split.

    The residual is the node-wise sup of
    ``|D_eta Theta - (D_x Theta) eta - DD_eta Theta|`` relative to the sup of
    ``|D_eta Theta|``, taken over the ``X``, ``P`` and ``v`` components.
    """
    _check_mfg(base)
    eta = np.asarray(eta, dtype=np.float64).reshape(base.X.shape[1:])
    J = jacobian_x(base, tol=tol)
    direct = gateaux_xi(base, eta=eta, tol=tol)
    Jeta = _directional(J.X, eta)
    problem = _SelfCopyProblem(base, np.zeros_like(eta)[..., None], "measure_part", offset=Jeta)
    part = solve_linear(scheme(base), problem, tol)
    state = {
        "X": Jeta,
        "P": np.einsum("kiac,ic->kia", J.P, eta)[..., None],
        "v": np.einsum("kiec,ic->kie", J.v, eta)[..., None],
    }
    residuals = {}
    for comp in ("X", "P", "v"):
        d = getattr(direct, comp)
        diff = d - state[comp] - getattr(part, comp)
        scale = np.max(np.abs(d))
        residuals[comp] = float(np.max(np.abs(diff)) / scale) if scale > 0 else float(np.max(np.abs(diff)))
    return Decomposition(direct, state, part, max(residuals.values()), residuals)


class _FrozenMeasureProblem(LinearProblem):
    """Systems on a frozen solution driven only by copy terms on other clouds."""

    def __init__(self, sol, Z0, name, fixed):
        self.sol, self.Z0, self.name, self.fixed = sol, Z0, name, fixed

    def initial(self):
        return self.Z0

    def sources(self, k, Z):
        return self.fixed(k)

    def terminal(self, Z):
        return self.fixed.terminal()


class _CopyDrive:
    """Copy-term sources from a list of (solution, cloud values) pairs.

    Each entry contributes ``E~[kernel(x_i, X~_j) Z~_j]`` where the copies
    are the particles of ``cloud`` at each node and ``Z`` holds their values
    with shape (K+1, M, n, q). Entries flagged ``second`` contract the second
    y-derivative kernel against flattened outer products.
    """

    def __init__(self, target, entries):
        self.target = target
        self.entries = entries
        self._kern = {}
        self._memo = {}

    def _ks(self, k):
        if k not in self._kern:
            self._kern[k] = kernels_at(self.target, k)
        return self._kern[k]

    def __call__(self, k):
        # copy values are fixed inputs, so each node is evaluated once
        if k not in self._memo:
            self._memo[k] = self._evaluate(k)
        return self._memo[k]

    def _evaluate(self, k):
        out = Sources()
        if not self.target.model.has_mean_field:
            return out
        K = self.target.grid.K
        for ctx_of, Z, second in self.entries:
            ctx = ctx_of(k)
            if k == K:
                out = out + Sources(c=self._ks(k).contract("c", ctx, Z[k], second))
            else:
                out = out + self._ks(k).sources(ctx, Z[k], second)
        return out

    def terminal(self):
        if "terminal" not in self._memo:
            self._memo["terminal"] = self._terminal()
        return self._memo["terminal"]

    def _terminal(self):
        if not self.target.model.has_mean_field:
            return None
        K = self.target.grid.K
        out = None
        for ctx_of, Z, second in self.entries:
            out = _add(out, self._ks(K).contract("gx", ctx_of(K), Z[K], second))
        return out


def gateaux_mu(xsol, mfg, eta, measure_part=None, tol=FLOW_TOL):
    """Derivative of a frozen solution from ``x`` in the lifted initial law along ``eta``.

    The copy terms use the equilibrium cloud carrying
    ``D_x X|_{x=xi} eta + DD_eta X``.
    """
    _check_mfg(mfg)
    eta = np.asarray(eta, dtype=np.float64).reshape(mfg.X.shape[1:])
    if measure_part is None:
        measure_part = decompose_gateaux(mfg, eta=eta, tol=tol).measure_part
    J = jacobian_x(mfg, tol=tol)
    Zc = _directional(J.X, eta) + measure_part.X
    drive = _CopyDrive(xsol, [(lambda k: copy_context(mfg, k), Zc, False)])
    Nx, n = xsol.X.shape[1:]
    problem = _FrozenMeasureProblem(xsol, np.zeros((Nx, n, 1)), "gateaux_mu", drive)
    return solve_linear(scheme(xsol), problem, tol)


# --------------------------------------------------------------------------
# kernel flows on a y-grid


@dataclass
class YGrid:
    """Cloud points used as kernel-flow nodes, with quadrature weights."""

    index: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    strata: list


def quantile_grid(cloud, size=32):
    """Pick ``size`` particles stratified by lexicographic order.

    The sorted cloud is cut into ``size`` contiguous strata of (nearly) equal
    mass; each stratum is represented by its median particle and weighted by
    its mass.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    N = cloud.shape[0]
    size = max(1, min(int(size), N))
    order = lex_order(cloud)
    cuts = np.linspace(0, N, size + 1).round().astype(int)
    idx, weights, strata = [], [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        members = order[a:b]
        idx.append(int(members[(b - a) // 2]))
        weights.append((b - a) / N)
        strata.append(members)
    idx = np.array(idx)
    return YGrid(idx, cloud[idx], np.array(weights), strata)


@dataclass
class Companions:
    """Frozen solutions started at each y-grid point (one block per point)."""

    ygrid: YGrid
    count: int
    X: np.ndarray        # (K+1, R*Nc, n)
    P: np.ndarray
    v: np.ndarray
    J: LinearFlow        # D_y X along companions, columns c
    H: LinearFlow = None  # D_y^2 X, columns (c, c')
    contexts: dict = field(default_factory=dict)

    def block(self, r):
        return slice(r * self.count, (r + 1) * self.count)

    def context(self, r, k):
        key = (r, k)
        if key not in self.contexts:
            self.contexts[key] = IndependentCopyContext(self.X[k, self.block(r)])
        return self.contexts[key]


class _CompanionSolution:
    """Minimal stand-in for a solution so Linearization and kernels work on companions."""

    def __init__(self, base, X, P, v, dB):
        self.model, self.grid, self.measure_flow = base.model, base.grid, base.measure_flow
        self.X, self.P, self.v, self.dB = X, P, v, dB
        self.config = base.config
        self.cache = {}


def companions(base, ygrid, count=None, tol=FLOW_TOL, second=False):
    """Simulate frozen solutions from each y-grid point against the equilibrium.

    Companion ``j`` of every block reuses noise stream ``j`` of the base, and
    the decoupling fields of the base (they do not depend on the start).
    ``count`` defaults to ``min(N, COMPANIONS)`` per point.
    """
    _check_mfg(base)
    N = base.X.shape[1]
    Nc = min(N, COMPANIONS) if count is None else max(1, min(int(count), N))
    R = len(ygrid.index)
    x0 = np.repeat(ygrid.points, Nc, axis=0)
    dB = np.tile(base.dB[:Nc], (R, 1, 1))
    X, P, v = propagate(base.model, base.grid, x0, base.measure_flow, dB, base.fields)
    J = jacobian_x(base, tol=tol)
    comp = _CompanionSolution(base, X, P, v, dB)
    n = base.model.n
    # companions are many; coefficients are recomputed rather than cached
    lin = Linearization(base.model, base.grid, X, P, v, base.measure_flow, cache=False)
    view = scheme(base).view(lin, dB)
    jac = propagate_linear(view, _JacobianProblem(R * Nc, n), J.fields)
    out = Companions(ygrid, Nc, X, P, v, jac)
    if second:
        H = hessian_x(base, tol=tol)
        out.H = propagate_linear(view, _HessianProblem(comp, jac), H.fields)
    return out


def _stack_blocks(values, comp):
    """Per-block copy values laid out as flow columns.

    ``values`` has shape (K+1, R*Nc, n, m); the result for block ``r`` fills
    columns ``r*m:(r+1)*m`` and is zero elsewhere, returned per block.
    """
    R = len(comp.ygrid.index)
    K1, _, n, m = values.shape
    out = []
    for r in range(R):
        Z = np.zeros((K1, comp.count, n, R * m))
        Z[:, :, :, r * m:(r + 1) * m] = values[:, comp.block(r)]
        out.append(Z)
    return out


def _companion_entries(comp, values, second=False):
    R = len(comp.ygrid.index)
    blocks = _stack_blocks(values, comp)
    return [((lambda k, r=r: comp.context(r, k)), blocks[r], second) for r in range(R)]


def kernel_flows(base, model=None, ygrid=None, x_solution=None, companion_count=None, tol=FLOW_TOL,
                 comp=None):
    """Kernel flows of the equilibrium and of a frozen solution on a y-grid.

    Parameters
    ----------
    base : FBSDESolution
        Output of ``solve_mfg``.
    ygrid : YGrid or int, optional
        Grid of base points; an int gives that many quantile-stratified
        particles (default 32).
    x_solution : FBSDESolution, optional
        Frozen solution from a point ``x``; when given its kernel flow is
        solved as well.

    Returns
    -------
    dict
        ``"xi"`` and (optionally) ``"mu"`` LinearFlow objects with columns
        ordered ``(r, c)``, plus ``"ygrid"`` and ``"companions"``.
    """
    _check_mfg(base)
    if ygrid is None or isinstance(ygrid, (int, np.integer)):
        ygrid = quantile_grid(base.X[0], 32 if ygrid is None else int(ygrid))
    n = base.model.n
    R = len(ygrid.index)
    N = base.X.shape[1]
    if comp is None:
        comp = companions(base, ygrid, companion_count, tol)
    out = {"ygrid": ygrid, "companions": comp}
    if not base.model.has_mean_field:
        K1 = base.grid.K + 1
        zero = LinearFlow("kernel_xi", np.zeros((K1, N, n, R * n)), np.zeros((K1, N, n, R * n)),
                          np.zeros((K1, N, base.model.d, R * n)), np.zeros((K1 - 1, N, n, base.dB.shape[2], R * n)),
                          [], 0)
        out["xi"] = zero
        if x_solution is not None:
            Nx = x_solution.X.shape[1]
            out["mu"] = LinearFlow("kernel_mu", np.zeros((K1, Nx, n, R * n)), np.zeros((K1, Nx, n, R * n)),
                                   np.zeros((K1, Nx, base.model.d, R * n)),
                                   np.zeros((K1 - 1, Nx, n, base.dB.shape[2], R * n)), [], 0)
        return out
    entries = _companion_entries(comp, comp.J.X)
    drive = _CopyDrive(base, entries)
    problem = _SelfCopyProblem(base, np.zeros((N, n, R * n)), "kernel_xi", fixed=drive)
    xi = solve_linear(scheme(base), problem, tol)
    out["xi"] = xi
    if x_solution is not None:
        entries_x = _companion_entries(comp, comp.J.X) + [((lambda k: copy_context(base, k)), xi.X, False)]
        drive_x = _CopyDrive(x_solution, entries_x)
        Nx = x_solution.X.shape[1]
        px = _FrozenMeasureProblem(x_solution, np.zeros((Nx, n, R * n)), "kernel_mu", drive_x)
        out["mu"] = solve_linear(scheme(x_solution), px, tol)
    return out


def lifting_reduction(kflow, ygrid, eta, n):
    """``sum_r w_r DD X(., y_r) eta(y_r)`` for a kernel flow with columns (r, c).

    ``eta`` is the per-particle direction of the equilibrium cloud; the
    value at ``y_r`` is averaged over stratum ``r`` so the reduction is the
    stratified quadrature of ``E^[DD X(., xi^) eta^]``.
    """
    R = len(ygrid.index)
    eta = np.asarray(eta, dtype=np.float64)
    eta_r = np.array([eta[s].mean(axis=0) for s in ygrid.strata])       # (R, n)
    X = kflow.X.reshape(kflow.X.shape[:-1] + (R, n))
    return np.einsum("kiarc,r,rc->kia", X, ygrid.weights, eta_r)


def lifting_check(base, eta, kflows, x_solution=None, tol=FLOW_TOL):
    """Compare cloud reductions of kernel flows with direct directional flows.

    Returns the relative RMS mismatch for the equilibrium (and the frozen
    problem when a kernel flow for it is present).
    """
    n = base.model.n
    eta = np.asarray(eta, dtype=np.float64).reshape(base.X.shape[1:])
    ygrid = kflows["ygrid"]
    dec = decompose_gateaux(base, eta=eta, tol=tol)
    red = lifting_reduction(kflows["xi"], ygrid, eta, n)
    ref = dec.measure_part.X[..., 0]
    out = {"xi": _rel_rms(red, ref)}
    if x_solution is not None and "mu" in kflows:
        dmu = gateaux_mu(x_solution, base, eta, dec.measure_part, tol)
        out["mu"] = _rel_rms(lifting_reduction(kflows["mu"], ygrid, eta, n), dmu.X[..., 0])
    return out


def _rel_rms(a, b):
    num = np.sqrt(np.mean((a - b) ** 2))
    den = np.sqrt(np.mean(b ** 2))
    return float(num / den) if den > 0 else float(num)


# --------------------------------------------------------------------------
# second order


def _pair_columns(A, n):
    """Split (N, k, n) columns into pair factors for columns ``(c1, c2)``.

    Returns arrays of shape (N, k, n*n) holding ``A[:, :, c1]`` and
    ``A[:, :, c2]`` for the flattened pair index.
    """
    c1 = np.repeat(np.arange(n), n)
    c2 = np.tile(np.arange(n), n)
    return A[:, :, c1], A[:, :, c2]


def _bilinear(T, a, b):
    """``T[i, o, x, y] a[i, x, q] b[i, y, q]`` -> (N, o, q)."""
    return np.einsum("ioxy,ixq,iyq->ioq", T, a, b)


class _HessianProblem(LinearProblem):
    """Second derivative in the initial state; sources are quadratic in ``D_x Theta``."""

    name = "hessian_x"

    def __init__(self, sol, jac):
        self.sol, self.jac = sol, jac
        md = sol.model
        if not md.has_third_derivatives:
            raise CapabilityError(f"{md.name} does not provide third derivatives")
        self.n, self.d = md.n, md.d
        self.N = sol.X.shape[1]
        self._cache = {}

    def initial(self):
        return np.zeros((self.N, self.n, self.n * self.n))

    def h_weights(self, k):
        # h is bilinear in D_x X(k), which varies along paths through the same X(k)
        n = self.n
        JX = self.jac.X[k]
        return np.einsum("iec,ifd->iefcd", JX, JX).reshape(self.N, n * n, n * n)

    def _pairs(self, k):
        n = self.n
        J = self.jac
        u1, u2 = _pair_columns(J.X[k], n)
        w1, w2 = _pair_columns(J.v[k], n)
        p1, p2 = _pair_columns(J.P[k], n)
        return u1, u2, w1, w2, p1, p2

    def sources(self, k, Z):
        if k in self._cache:
            return self._cache[k]
        md, sol = self.sol.model, self.sol
        s, x, v, P, m = sol.grid.nodes[k], sol.X[k], sol.v[k], sol.P[k], sol.measure_flow[k]
        N, n, d = self.N, self.n, self.d
        u1, u2, w1, w2, p1, p2 = self._pairs(k)

        bxx = _full(md.b_xx(s, x, m, v), N, (n, n, n))
        bxv = _full(md.b_xv(s, x, m, v), N, (n, n, d))
        bvv = _full(md.b_vv(s, x, m, v), N, (n, d, d))
        bxxx = _full(md.b_xxx(s, x, m, v), N, (n, n, n, n))
        bxxv = _full(md.b_xxv(s, x, m, v), N, (n, n, n, d))
        bxvv = _full(md.b_xvv(s, x, m, v), N, (n, n, d, d))
        bvvv = _full(md.b_vvv(s, x, m, v), N, (n, d, d, d))
        fxxx = _full(md.f_xxx(s, x, m, v), N, (n, n, n))
        fxxv = _full(md.f_xxv(s, x, m, v), N, (n, n, d))
        fxvv = _full(md.f_xvv(s, x, m, v), N, (n, d, d))
        fvvv = _full(md.f_vvv(s, x, m, v), N, (d, d, d))

        Sb = (_bilinear(bxx, u1, u2) + _bilinear(bxv, u1, w2) + _bilinear(bxv, u2, w1)
              + _bilinear(bvv, w1, w2))

        # adjoint-weighted third derivatives
        Pxxx = np.einsum("ia,iacxy->icxy", P, bxxx) + fxxx
        Pxxv = np.einsum("ia,iacxe->icxe", P, bxxv) + fxxv
        Pxvv = np.einsum("ia,iacef->icef", P, bxvv) + fxvv
        Pvvv = np.einsum("ia,iaefg->iefg", P, bvvv) + fvvv

        # first derivative of D_x b' and D_v b' along the paired directions
        def dbx(u, w):   # (N, a, c, q): b_xx[a, c, :] u + b_xv[a, c, :] w
            return np.einsum("iacx,ixq->iacq", bxx, u) + np.einsum("iace,ieq->iacq", bxv, w)

        def dbv(u, w):   # (N, a, e, q): b_xv[a, :, e] u + b_vv[a, e, :] w
            return np.einsum("iaxe,ixq->iaeq", bxv, u) + np.einsum("iaef,ifq->iaeq", bvv, w)

        Sp = (np.einsum("iaq,iacq->icq", p1, dbx(u2, w2)) + np.einsum("iaq,iacq->icq", p2, dbx(u1, w1))
              + _bilinear(Pxxx, u1, u2) + _bilinear(Pxxv, u1, w2) + _bilinear(Pxxv, u2, w1)
              + _bilinear(Pxvv, w1, w2))
        Pxxv_T = np.swapaxes(np.swapaxes(Pxxv, 1, 3), 2, 3)    # (N, e, x, x')
        Pxvv_T = np.swapaxes(Pxvv, 1, 2)                       # (N, e, x, f)
        Sc = (np.einsum("iaq,iaeq->ieq", p1, dbv(u2, w2)) + np.einsum("iaq,iaeq->ieq", p2, dbv(u1, w1))
              + _bilinear(Pxxv_T, u1, u2) + _bilinear(Pxvv_T, u1, w2) + _bilinear(Pxvv_T, u2, w1)
              + _bilinear(Pvvv, w1, w2))
        out = Sources(b=Sb, c=Sc, p=Sp)
        self._cache[k] = out
        return out

    def terminal(self, Z):
        sol = self.sol
        K = sol.grid.K
        n = self.n
        gxxx = _full(sol.model.g_xxx(sol.X[K], sol.measure_flow[K]), self.N, (n, n, n))
        u1, u2 = _pair_columns(self.jac.X[K], n)
        return _bilinear(gxxx, u1, u2)


def hessian_x(base, model=None, tol=FLOW_TOL):
    """Second derivative in the initial state, columns ordered ``(c1, c2)``."""
    cached = base.cache.get("hessian_x")
    if cached is not None:
        return cached
    J = jacobian_x(base, tol=tol)
    out = solve_linear(scheme(base), _HessianProblem(base, J), tol)
    base.cache["hessian_x"] = out
    return out


def kernel_flow_yderiv(base, model=None, kflows=None, x_solution=None, tol=FLOW_TOL):
    """y-derivatives of the kernel flows on the y-grid of ``kflows``.

    Columns are ordered ``(r, c, c')`` where ``c`` indexes the kernel-flow
    column and ``c'`` the y-derivative direction.
    """
    _check_mfg(base)
    md = base.model
    if not md.has_third_derivatives:
        raise CapabilityError(f"{md.name} does not provide third derivatives")
    if kflows is None:
        kflows = kernel_flows(base, x_solution=x_solution, tol=tol)
    ygrid = kflows["ygrid"]
    comp = kflows["companions"]
    if comp.H is None:
        comp = companions(base, ygrid, comp.count, tol, second=True)
        kflows["companions"] = comp
    n = md.n
    R = len(ygrid.index)
    N = base.X.shape[1]
    q = R * n * n
    out = {"ygrid": ygrid}
    if not md.has_mean_field:
        K1 = base.grid.K + 1
        w = base.dB.shape[2]
        out["xi"] = LinearFlow("kernel_xi_y", np.zeros((K1, N, n, q)), np.zeros((K1, N, n, q)),
                               np.zeros((K1, N, md.d, q)), np.zeros((K1 - 1, N, n, w, q)), [], 0)
        if x_solution is not None:
            Nx = x_solution.X.shape[1]
            out["mu"] = LinearFlow("kernel_mu_y", np.zeros((K1, Nx, n, q)), np.zeros((K1, Nx, n, q)),
                                   np.zeros((K1, Nx, md.d, q)), np.zeros((K1 - 1, Nx, n, w, q)), [], 0)
        return out
    # companion inputs: D_y^2 X^y with columns (c, c') and outer products of D_y X^y
    JX = comp.J.X                                    # (K+1, R*Nc, n, n)
    HX = comp.H.X                                    # (K+1, R*Nc, n, n*n)
    outer = np.einsum("kiec,kifd->kiefcd", JX, JX).reshape(JX.shape[0], JX.shape[1], n * n, n * n)
    entries = _companion_entries(comp, HX) + _companion_entries(comp, outer, second=True)
    drive = _CopyDrive(base, entries)
    problem = _SelfCopyProblem(base, np.zeros((N, n, q)), "kernel_xi_y", fixed=drive)
    xi = solve_linear(scheme(base), problem, tol)
    out["xi"] = xi
    if x_solution is not None:
        entries_x = entries + [((lambda k: copy_context(base, k)), xi.X, False)]
        Nx = x_solution.X.shape[1]
        px = _FrozenMeasureProblem(x_solution, np.zeros((Nx, n, q)), "kernel_mu_y", _CopyDrive(x_solution, entries_x))
        out["mu"] = solve_linear(scheme(x_solution), px, tol)
    return out


# --------------------------------------------------------------------------
# bundle and export


@dataclass
class FlowBundle:
    """All flows computed along one base solution."""

    base: object
    jacobian: LinearFlow = None
    gateaux: dict = field(default_factory=dict)
    kernel: dict = None
    hessian: LinearFlow = None
    kernel_y: dict = None
    x_solution: object = None
    particles: object = None   # exported particle indices (all when None)

    def tables(self):
        """Flow name -> (header, rows) for CSV export."""
        out = {}
        if self.jacobian is not None:
            out["jacobian_x"] = _flow_rows(self.jacobian, "column", self.particles)
        if self.hessian is not None:
            out["hessian_x"] = _flow_rows(self.hessian, "column", self.particles)
        for key, fl in self.gateaux.items():
            out[f"gateaux_{key}"] = _flow_rows(fl, "column", self.particles)
        if self.kernel is not None:
            for key in ("xi", "mu"):
                if key in self.kernel:
                    out[f"kernel_{key}"] = _flow_rows(self.kernel[key], "y_column", self.particles)
        if self.kernel_y is not None:
            for key in ("xi", "mu"):
                if key in self.kernel_y:
                    out[f"kernel_{key}_y"] = _flow_rows(self.kernel_y[key], "y_column", self.particles)
        return out

    def to_csv(self, directory):
        """Write one CSV per flow; returns the written paths."""
        paths = []
        for name, (header, rows) in sorted(self.tables().items()):
            path = os.path.join(directory, f"flow_{name}.csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
            paths.append(path)
        return paths


def _flow_rows(fl, colname, particles=None):
    """Rows ``step, particle, column, X..., P..., v...`` with repr-exact floats."""
    K1, N, n, q = fl.X.shape
    d = fl.v.shape[2]
    header = (["step", "particle", colname] + [f"X{a + 1}" for a in range(n)] + [f"P{a + 1}" for a in range(n)]
              + [f"v{e + 1}" for e in range(d)])
    keep = range(N) if particles is None else [i for i in particles if i < N]
    rows = []
    for k in range(K1):
        for i in keep:
            for j in range(q):
                rows.append([k, i, j] + [repr(float(a)) for a in fl.X[k, i, :, j]]
                            + [repr(float(a)) for a in fl.P[k, i, :, j]]
                            + [repr(float(a)) for a in fl.v[k, i, :, j]])
    return header, rows
