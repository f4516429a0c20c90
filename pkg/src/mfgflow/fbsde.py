"""Particle solvers for the equilibrium and frozen-measure adjoint systems.

The state is simulated forward with Euler-Maruyama, the adjoint backward
with an implicit one-step scheme

``P(k) = E[P(k+1) | X(k)] + dt (D_x H(X(k), P(k)) + sum_j sigma1_j' Q_j(k))``

where ``E[.|X(k)]`` and ``Q_j(k) = E[P(k+1) dB_j(k) | X(k)] / dt`` come from
one joint least-squares fit of ``P(k+1)`` on ``[phi, phi dB_1, ...]``. The
fitted coefficients form the decoupling field used by the next forward
pass. Forward and backward passes alternate until the adjoint stops
changing; the equilibrium problem wraps this in a Picard iteration on the
measure flow.
"""
from dataclasses import asdict, dataclass, field, replace
import csv
import json
import warnings

import numpy as np

from . import _small
from ._regression import PolyBasis, RegressionError, fit, noise_design
from .conditions import check_cone_condition, check_property_S
from .hamiltonian import NEWTON_TOL, dxH_at, lagrangian_grad_v, minimize_lagrangian
from .measures import EmpiricalMeasure, as_measure, cloud_mean, w2_empirical
from .model import TimeGrid, generate_paths

ADJOINT_TOL = 1e-13
ADJOINT_MAX = 30


class SolverError(RuntimeError):
    """A solver did not converge; ``diagnostics`` carries the history."""

    def __init__(self, message, diagnostics=None, node=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.node = node


@dataclass
class SolverConfig:
    """Numerical settings shared by all solvers.

    Attributes
    ----------
    N, K : int
        Particles and time steps.
    T : float
        Horizon.
    picard_tol : float
        Stop when ``max_k W2(m_new(k), m_old(k))`` falls below this.
    damping : float
        Weight of the new decoupling field in each Picard update, in (0, 1].
    degree : int
        Total degree of the regression basis.
    sweep_tol : float
        Relative change of the adjoint at which forward/backward sweeps stop.
    stride : int, optional
        Subsampling stride for independent-copy expectations.
    """

    N: int = 2000
    K: int = 50
    T: float = 1.0
    seed: int = 0
    picard_max: int = 60
    picard_tol: float = 1e-7
    damping: float = 1.0
    degree: int = 2
    cone_tol: float = 1e-6
    stride: object = None
    sweep_tol: float = 1e-12
    sweep_max: int = 120
    newton_tol: float = NEWTON_TOL
    threads: int = 1

    def __post_init__(self):
        if not (0 < self.damping <= 1):
            raise ValueError("damping must lie in (0, 1]")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.N < 1 or self.K < 1:
            raise ValueError("N and K must be positive")
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if self.seed is None:
            raise ValueError("seed is required")

    def grid(self, t):
        return TimeGrid(float(t), float(self.T), int(self.K))

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# pointwise coefficient evaluation

def _full(a, N, shape):
    return np.broadcast_to(np.asarray(a, dtype=np.float64), (N,) + shape)


def cross_curvature(model, s, x, m, v, p):
    """``W[c, e] = sum_a p_a d^2 b_a/dx_c dv_e + d^2 f/dx_c dv_e``, shape (N, n, d)."""
    N = x.shape[0]
    bxv = _full(model.b_xv(s, x, m, v), N, (model.n, model.n, model.d))
    fxv = _full(model.f_xv(s, x, m, v), N, (model.n, model.d))
    return np.einsum("iace,ia->ice", bxv, p) + fxv


def state_curvature(model, s, x, m, v, p):
    """``sum_a p_a D_x^2 b_a + D_x^2 f``, shape (N, n, n)."""
    N = x.shape[0]
    bxx = _full(model.b_xx(s, x, m, v), N, (model.n, model.n, model.n))
    fxx = _full(model.f_xx(s, x, m, v), N, (model.n, model.n))
    return np.einsum("iacd,ia->icd", bxx, p) + fxx


def control_curvature(model, s, x, m, v, p):
    N = x.shape[0]
    bvv = _full(model.b_vv(s, x, m, v), N, (model.n, model.d, model.d))
    fvv = _full(model.f_vv(s, x, m, v), N, (model.d, model.d))
    return np.einsum("iaef,ia->ief", bvv, p) + fvv


def adjoint_jacobian(model, s, x, m, v, p, dt):
    """Jacobian of the implicit adjoint equation in ``P``.

    ``I - dt (D_x b' - W M^{-1} D_v b')`` with ``M = D_v^2 L``.
    """
    N, n = x.shape
    bx = _full(model.b_x(s, x, m, v), N, (n, n))
    bv = _full(model.b_v(s, x, m, v), N, (n, model.d))
    M = control_curvature(model, s, x, m, v, p)
    W = cross_curvature(model, s, x, m, v, p)
    dv_dp = -_small.solve(M, np.swapaxes(bv, 1, 2))
    return np.eye(n)[None] - dt * (np.swapaxes(bx, 1, 2) + W @ dv_dp)


def noise_adjoint_term(sig1, Q):
    """``sum_j sigma1_j' Q_j``; ``Q`` has shape (N, n, w) with column ``j`` = ``Q_j``."""
    return np.einsum("jac,iaj->ic", sig1, Q)


def solve_adjoint(model, s, x, m, E, Q, dt, v0=None, tol=NEWTON_TOL):
    """Solve ``P = E + dt (D_x H(x, m, P) + sum_j sigma1_j' Q_j)`` per particle.

    Newton's method in ``P``; each residual evaluation minimizes the
    Lagrangian for the current ``P``.

    Returns
    -------
    (P, v) : ndarrays of shape (N, n) and (N, d)
    """
    sig1 = np.asarray(model.sigma1(s), dtype=np.float64)
    rhs = E + dt * noise_adjoint_term(sig1, Q)
    P = rhs.copy()
    v = v0
    scale = 1.0 + float(np.max(np.abs(rhs))) if rhs.size else 1.0
    for _ in range(ADJOINT_MAX):
        v = minimize_lagrangian(model, s, x, m, P, tol=tol, v0=v).v_hat
        G = P - rhs - dt * dxH_at(model, s, x, m, v, P)
        if float(np.max(np.abs(G))) <= ADJOINT_TOL * scale:
            return P, v
        Jm = adjoint_jacobian(model, s, x, m, v, P, dt)
        P = P - _small.solve(Jm, G)
    v = minimize_lagrangian(model, s, x, m, P, tol=tol, v0=v).v_hat
    G = P - rhs - dt * dxH_at(model, s, x, m, v, P)
    if float(np.max(np.abs(G))) > 1e3 * ADJOINT_TOL * scale:
        raise SolverError(f"implicit adjoint step did not converge at s = {s:.6g}")
    return P, v


# --------------------------------------------------------------------------
# decoupling field

@dataclass
class FieldNode:
    """Fitted conditional expectations at one node.

    ``coef`` multiplies ``[phi, phi dB_1, ..., phi dB_w]``; the first block
    gives ``E[P(k+1)|x]`` and block ``j`` gives ``Q_j(x)``.
    """

    basis: PolyBasis
    coef: np.ndarray
    noise_dim: int

    def evaluate(self, x):
        phi = self.basis(x)
        nb = self.basis.size
        E = phi @ self.coef[:nb]
        Q = np.stack([phi @ self.coef[nb * (j + 1):nb * (j + 2)] for j in range(self.noise_dim)], axis=-1)
        return E, Q


def _fit_node(X, dB, target, degree):
    basis = PolyBasis.fit(X, degree)
    while True:
        design = noise_design(basis(X), dB)
        coef, rank = fit(design, target)
        if int(rank) == design.shape[1]:
            return FieldNode(basis, coef, dB.shape[1])
        if basis.degree == 0 or not basis.active:
            raise RegressionError(f"regression design has rank {int(rank)} < {design.shape[1]} at degree 0")
        basis = basis.lowered()


def _reexpress(old, new_basis, X, dB):
    """Write ``old`` in ``new_basis`` by fitting its values on the cloud ``X``."""
    E, Q = old.evaluate(X)
    phi = new_basis(X)
    nb = new_basis.size
    coef = np.zeros((nb * (1 + old.noise_dim), E.shape[1]))
    c, _ = fit(phi, E)
    coef[:nb] = c
    for j in range(old.noise_dim):
        c, _ = fit(phi, Q[..., j])
        coef[nb * (j + 1):nb * (j + 2)] = c
    return FieldNode(new_basis, coef, old.noise_dim)


def damp_fields(new, old, theta, X, dB):
    """Convex combination ``theta new + (1 - theta) old`` of two fields."""
    out = []
    for k, (fn, fo) in enumerate(zip(new, old)):
        fo2 = _reexpress(fo, fn.basis, X[k], dB[:, k])
        out.append(FieldNode(fn.basis, theta * fn.coef + (1 - theta) * fo2.coef, fn.noise_dim))
    return out


# --------------------------------------------------------------------------
# solution container

@dataclass
class FBSDESolution:
    """Per-node particle trajectories.

    Attributes
    ----------
    X, P : ndarray, shape (K+1, N, n)
    Q : ndarray, shape (K+1, N, n, w)
        Column ``j`` is ``Q_j``; the terminal node is zero.
    v : ndarray, shape (K+1, N, d)
    measure_flow : list of EmpiricalMeasure
        The flow the coefficients were evaluated against.
    fields : list of FieldNode
        Decoupling field per node ``k < K``.
    """

    grid: TimeGrid
    X: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    v: np.ndarray
    measure_flow: list
    fields: list
    dB: np.ndarray
    model: object
    config: SolverConfig
    diagnostics: dict = field(default_factory=dict)
    kind: str = "frozen"
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def N(self):
        return self.X.shape[1]

    @property
    def xi(self):
        return self.X[0]

    def theta(self):
        """Stacked ``(X, P, v)`` per node and particle."""
        return np.concatenate([self.X, self.P, self.v], axis=-1)

    def to_csv(self, path):
        n, d = self.X.shape[2], self.v.shape[2]
        qn = np.sqrt(np.sum(self.Q ** 2, axis=(2, 3)))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "time", "particle"] + [f"X{a + 1}" for a in range(n)]
                       + [f"P{a + 1}" for a in range(n)] + [f"v{e + 1}" for e in range(d)] + ["Q_fro"])
            times = self.grid.nodes
            for k in range(self.X.shape[0]):
                for i in range(self.N):
                    row = [k, repr(float(times[k])), i]
                    row += [repr(float(u)) for u in self.X[k, i]]
                    row += [repr(float(u)) for u in self.P[k, i]]
                    row += [repr(float(u)) for u in self.v[k, i]]
                    row.append(repr(float(qn[k, i])))
                    w.writerow(row)

    def summary(self):
        return _jsonable(self.diagnostics)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


# --------------------------------------------------------------------------
# passes

def _noise(model, s, X, m, dBk):
    sig = model.sigma(s, X, m)
    return np.einsum("iaj,ij->ia", sig, dBk)


def forward_pass(model, grid, x0, flow, dB, fields=None, v_guess=None, tol=NEWTON_TOL):
    """Simulate the state with the control read off a decoupling field.

    Without a field the control minimizes the Lagrangian at ``p = 0``.

    Returns
    -------
    X : ndarray, shape (K+1, N, n)
    v : ndarray, shape (K, N, d)
    P : ndarray, shape (K, N, n)
        Adjoint read off the field (zero without a field).
    """
    K, dt = grid.K, grid.dt
    s_nodes = grid.nodes
    N = x0.shape[0]
    X = np.empty((K + 1, N, model.n))
    V = np.empty((K, N, model.d))
    PP = np.zeros((K, N, model.n))
    X[0] = x0
    for k in range(K):
        s, m, x = s_nodes[k], flow[k], X[k]
        v0 = None if v_guess is None else v_guess[k]
        if fields is None:
            v = minimize_lagrangian(model, s, x, m, np.zeros_like(x), tol=tol, v0=v0).v_hat
        else:
            E, Q = fields[k].evaluate(x)
            PP[k], v = solve_adjoint(model, s, x, m, E, Q, dt, v0=v0, tol=tol)
        V[k] = v
        X[k + 1] = x + _full(model.b(s, x, m, v), N, (model.n,)) * dt + _noise(model, s, x, m, dB[:, k])
        if not np.all(np.isfinite(X[k + 1])):
            raise SolverError(f"state became non-finite at node {k + 1}", node=k + 1)
    return X, V, PP


def propagate(model, grid, x0, flow, dB, fields, tol=NEWTON_TOL):
    """Forward simulation with a fitted field, returning full ``(X, P, v)``.

    Used for companion particles: the decoupling field of a frozen problem
    does not depend on the starting point.
    """
    X, v, P = forward_pass(model, grid, x0, flow, dB, fields, tol=tol)
    K = grid.K
    N = x0.shape[0]
    PK = _full(model.g_x(X[K], flow[K]), N, (model.n,))
    vK = minimize_lagrangian(model, grid.nodes[K], X[K], flow[K], PK, tol=tol, v0=v[K - 1]).v_hat
    return X, np.concatenate([P, PK[None]], axis=0), np.concatenate([v, vK[None]], axis=0)


def backward_pass(model, grid, X, flow, dB, degree, v_guess=None, tol=NEWTON_TOL):
    """Regression backward induction for the adjoint along the states ``X``."""
    K, dt = grid.K, grid.dt
    s_nodes = grid.nodes
    N, n = X.shape[1], X.shape[2]
    w = dB.shape[2]
    P = np.empty((K + 1, N, n))
    Q = np.zeros((K + 1, N, n, w))
    V = np.empty((K + 1, N, model.d))
    fields = [None] * K
    P[K] = _full(model.g_x(X[K], flow[K]), N, (n,))
    vK = None if v_guess is None else v_guess[K]
    V[K] = minimize_lagrangian(model, s_nodes[K], X[K], flow[K], P[K], tol=tol, v0=vK).v_hat
    for k in range(K - 1, -1, -1):
        node = _fit_node(X[k], dB[:, k], P[k + 1], degree)
        E, Qk = node.evaluate(X[k])
        v0 = V[k + 1] if v_guess is None else v_guess[k]
        P[k], V[k] = solve_adjoint(model, s_nodes[k], X[k], flow[k], E, Qk, dt, v0=v0, tol=tol)
        Q[k] = Qk
        fields[k] = node
    return P, Q, V, fields


def _cone_constant(model):
    c = getattr(model, "constants", None)
    if c is None:
        return None
    try:
        rows = check_property_S(c)
        row, K = check_cone_condition(c)
    except ValueError:
        return None
    if K is None or not row.passed or not all(r.passed for r in rows):
        return None
    return K


def _diagnose(model, grid, X, P, v, flow, config):
    K1, N, n = X.shape
    res = 0.0
    for k in range(K1):
        g = lagrangian_grad_v(model, grid.nodes[k], X[k], flow[k], v[k], P[k])
        res = max(res, float(np.max(np.abs(g))))
    out = {"max_first_order_residual": res}
    Kc = _cone_constant(model)
    out["cone_K"] = Kc
    if Kc is not None:
        viol = 0
        worst = -np.inf
        for k in range(K1):
            w2 = np.sqrt(flow[k].second_moment)
            bound = Kc * (1 + np.linalg.norm(X[k], axis=1) + w2)
            excess = np.linalg.norm(P[k], axis=1) - bound
            viol += int(np.sum(excess > config.cone_tol))
            worst = max(worst, float(np.max(excess)))
        out["cone_violations"] = viol
        out["cone_worst_excess"] = worst
    else:
        out["cone_violations"] = None
    c = getattr(model, "constants", None)
    if c is not None and c.lambda_b > 0:
        ratio = c.L ** 2 / c.lambda_b
        viol = 0
        for k in range(K1):
            w2 = np.sqrt(flow[k].second_moment)
            bound = ratio * (1 + np.linalg.norm(X[k], axis=1) + w2 + np.linalg.norm(v[k], axis=1))
            viol += int(np.sum(np.linalg.norm(P[k], axis=1) > bound + config.cone_tol))
        out["adjoint_bound_violations"] = viol
    return out


def _as_flow(measure_flow, K):
    flow = [as_measure(m) for m in measure_flow]
    if len(flow) != K + 1:
        raise ValueError(f"measure flow has {len(flow)} nodes, grid needs {K + 1}")
    return flow


def _paths_for(config, grid, N, n, paths=None):
    if paths is None:
        return generate_paths(grid, N, config.seed, dim=n).increments
    dB = paths.increments if hasattr(paths, "increments") else np.asarray(paths, dtype=np.float64)
    if dB.shape != (N, grid.K, n):
        raise ValueError(f"increments have shape {dB.shape}, expected {(N, grid.K, n)}")
    return dB


def solve_control_frozen(model, t, x0, measure_flow, paths, config, warm_fields=None, sweep_tol=None):
    """Solve the adjoint system of the control problem against a fixed flow.

    Parameters
    ----------
    model : CoefficientModel
    t : float
        Initial time; the horizon is ``config.T``.
    x0 : array_like, shape (N, n) or (n,)
        Initial state per particle; a single point is repeated.
    measure_flow : sequence of EmpiricalMeasure
        One measure per grid node.
    paths : BrownianPaths or ndarray or None
        Increments of shape (N, K, n); drawn from ``config.seed`` when None.
    config : SolverConfig
    warm_fields : list of FieldNode, optional
        Decoupling field for the first forward pass.
    sweep_tol : float, optional
        Overrides ``config.sweep_tol``.

    Returns
    -------
    FBSDESolution

    Raises
    ------
    SolverError
        When the sweeps do not settle within ``config.sweep_max``.
    """
    grid = config.grid(t)
    n = model.n
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0.reshape(1, n), (config.N, n)).copy()
    N = x0.shape[0]
    flow = _as_flow(measure_flow, grid.K)
    dB = _paths_for(config, grid, N, n, paths)
    fields = warm_fields
    P_old = None
    v_fwd = None
    v_bwd = None
    history = []
    tol = config.sweep_tol if sweep_tol is None else sweep_tol
    for sweep in range(1, config.sweep_max + 1):
        guess = None if v_bwd is None else v_bwd[:-1]
        X, v_fwd, _ = forward_pass(model, grid, x0, flow, dB, fields, guess, config.newton_tol)
        P, Q, v, fields = backward_pass(model, grid, X, flow, dB, config.degree, v_guess=v_bwd,
                                        tol=config.newton_tol)
        v_bwd = v
        if P_old is not None:
            change = float(np.max(np.abs(P - P_old)))
            scale = float(np.max(np.abs(P)))
            history.append(change / scale if scale > 0 else change)
            if change <= tol * scale or change == 0.0:
                break
        P_old = P
    else:
        raise SolverError(f"forward/backward sweeps did not settle after {config.sweep_max} sweeps",
                          {"sweep_history": history})
    diag = {"sweeps": sweep, "sweep_history": history, "sweep_tol": tol}
    diag.update(_diagnose(model, grid, X, P, v, flow, config))
    return FBSDESolution(grid, X, P, Q, v, flow, fields, dB, model, config, diag, "frozen")


def initial_flow(model, grid, xi, mu0, dB):
    """Law of the state driven by the minimizer at zero adjoint against ``mu0``."""
    X, _, _ = forward_pass(model, grid, xi, [mu0] * (grid.K + 1), dB)
    return [EmpiricalMeasure(X[k]) for k in range(grid.K + 1)]


def _flow_gap(a, b):
    return max(w2_empirical(p, q).value for p, q in zip(a, b))


def _initial_particles(mu0, N):
    pts = mu0.particles
    if pts.shape[0] == N:
        return np.array(pts)
    return np.array(pts[np.arange(N) % pts.shape[0]])


def solve_mfg(model, t, mu0, config, paths=None, warm_fields=None):
    """Equilibrium solve by Picard iteration on the measure flow.

    Each iteration solves the frozen control problem from ``xi ~ mu0``
    against the current flow, then replaces the flow by the law of the
    new states. With ``config.damping < 1`` the decoupling field is
    damped and the states are re-simulated from the damped field.

    Returns
    -------
    FBSDESolution
        ``measure_flow`` is the flow the final frozen solve was run
        against; ``diagnostics`` holds the gap history.

    Raises
    ------
    SolverError
        When the gap stays above ``config.picard_tol`` after
        ``config.picard_max`` iterations.
    """
    mu0 = as_measure(mu0)
    grid = config.grid(t)
    N = config.N
    xi = _initial_particles(mu0, N)
    dB = _paths_for(config, grid, N, model.n, paths)
    c = getattr(model, "constants", None)
    if c is not None:
        try:
            if not all(r.passed for r in check_property_S(c)):
                warnings.warn("Property (S) fails for the declared constants; proceeding", RuntimeWarning)
        except ValueError:
            pass
    flow = initial_flow(model, grid, xi, mu0, dB)
    fields = warm_fields
    gaps = []
    sweeps = []
    converged = False
    confirming = False
    # early iterations solve the frozen problem loosely; the tolerance
    # follows the gap down and the accepted solve is always a tight one
    loose = config.sweep_tol if not model.has_mean_field else max(config.sweep_tol, 1e-4)
    for it in range(1, config.picard_max + 1):
        sol = solve_control_frozen(model, t, xi, flow, dB, config, warm_fields=fields, sweep_tol=loose)
        sweeps.append(sol.diagnostics["sweeps"])
        if config.damping < 1 and fields is not None and it > 1:
            fields = damp_fields(sol.fields, fields, config.damping, sol.X, dB)
            X_new, _, _ = forward_pass(model, grid, xi, flow, dB, fields)
        else:
            fields = sol.fields
            X_new = sol.X
        new_flow = [EmpiricalMeasure(X_new[k]) for k in range(grid.K + 1)]
        if not model.has_mean_field:
            # the coefficients ignore the flow, so the first solve is the equilibrium
            gaps.append(0.0)
            flow = new_flow
            sol.measure_flow = flow
            converged = True
            break
        gap = _flow_gap(new_flow, flow)
        if confirming:
            # same flow re-solved tightly: refine the last gap, not a new iterate
            gaps[-1] = gap
        else:
            gaps.append(gap)
        confirming = False
        if gap <= config.picard_tol:
            if loose <= config.sweep_tol:
                converged = True
                break
            loose = config.sweep_tol
            confirming = True
            continue
        flow = new_flow
        loose = max(config.sweep_tol, min(loose, 1e-3 * gap))
    if not converged:
        raise SolverError(f"Picard iteration did not converge: gap {gaps[-1]:.3e} > {config.picard_tol:.1e}",
                          {"gap_history": gaps, "picard_iterations": len(gaps)})
    sol.kind = "mfg"
    sol.diagnostics.update({"picard_iterations": len(gaps), "gap_history": gaps,
                            "fixed_point_gap": gaps[-1], "sweeps_per_iteration": sweeps})
    return sol


# --------------------------------------------------------------------------
# value functional

@dataclass
class ValueEstimate:
    value: float
    stderr: float
    plain: float
    frozen: FBSDESolution


def trapezoid_weights(grid):
    w = np.full(grid.K + 1, grid.dt)
    w[0] = w[-1] = grid.dt / 2
    return w


def pathwise_cost(model, sol):
    """Running cost by the trapezoidal rule plus terminal cost, per particle."""
    grid = sol.grid
    w = trapezoid_weights(grid)
    N = sol.N
    J = np.zeros(N)
    for k in range(grid.K + 1):
        J = J + w[k] * _full(model.f(grid.nodes[k], sol.X[k], sol.measure_flow[k], sol.v[k]), N, ())
    return J + _full(model.g(sol.X[-1], sol.measure_flow[-1]), N, ())


def martingale_correction(model, sol):
    """``sum_k P(k)' sigma(X(k)) dB(k)`` per particle (mean zero)."""
    grid = sol.grid
    out = np.zeros(sol.N)
    for k in range(grid.K):
        sig = model.sigma(grid.nodes[k], sol.X[k], sol.measure_flow[k])
        out = out + np.einsum("ia,iaj,ij->i", sol.P[k], sig, sol.dB[:, k])
    return out


def value_estimate(model, t, x, mu0, config, mfg=None, control_variate=True):
    """Monte Carlo value of a player starting at ``x`` against the equilibrium.

    The player's frozen control problem is solved from ``x`` with the base
    noise; the pathwise cost is averaged. With ``control_variate`` the
    mean-zero martingale term built from the adjoint is subtracted.
    """
    x = np.asarray(x, dtype=np.float64).reshape(model.n)
    if t >= config.T:
        m = as_measure(mu0)
        return ValueEstimate(float(np.asarray(model.g(x[None], m)).reshape(-1)[0]), 0.0, float("nan"), None)
    if mfg is None:
        mfg = solve_mfg(model, t, mu0, config)
    sol = solve_control_frozen(model, t, x, mfg.measure_flow, mfg.dB, config, warm_fields=mfg.fields)
    J = pathwise_cost(model, sol)
    plain = float(cloud_mean(J))
    Y = J - martingale_correction(model, sol) if control_variate else J
    val = float(cloud_mean(Y))
    err = float(np.std(Y) / np.sqrt(len(Y)))
    return ValueEstimate(val, err, plain, sol)


def value(model, t, x, mu0, config, mfg=None, control_variate=True):
    """``V(t, x, mu)`` as a float; see :func:`value_estimate`."""
    return value_estimate(model, t, x, mu0, config, mfg, control_variate).value


# --------------------------------------------------------------------------
# stability probe

def _theta_norm(sol):
    th = sol.theta()
    return float(np.max(np.sqrt(np.mean(np.sum(th ** 2, axis=2), axis=1))))


def _theta_dist(a, b):
    d = a.theta() - b.theta()
    return float(np.max(np.sqrt(np.mean(np.sum(d ** 2, axis=2), axis=1))))


def growth_and_stability_probe(model, config, mu0=None, sizes=(0.1, 0.01, 0.001), norms=(0.0, 1.0, 10.0),
                               t=0.0, direction=None):
    """Difference quotients and growth ratios of the equilibrium solution.

    Returns
    -------
    dict
        ``difference_ratios[h] = ||Theta' - Theta|| / ||xi' - xi||`` for the
        perturbation ``xi' = xi + h * direction`` and
        ``growth_ratios[r] = ||Theta|| / (1 + ||xi||)`` for clouds rescaled
        to root-mean-square norm ``r``. Norms are sup over nodes of the
        particle root-mean-square.
    """
    n = model.n
    if mu0 is None:
        mu0 = EmpiricalMeasure(generate_paths(TimeGrid(0, 1, 1), config.N, config.seed, dim=n, stream=7)
                               .increments[:, 0])
    mu0 = as_measure(mu0)
    xi = _initial_particles(mu0, config.N)
    base = solve_mfg(model, t, EmpiricalMeasure(xi), config)
    if direction is None:
        direction = np.ones_like(xi)
    direction = np.asarray(direction, dtype=np.float64).reshape(xi.shape)
    dnorm = float(np.sqrt(np.mean(np.sum(direction ** 2, axis=1))))
    ratios = {}
    for h in sizes:
        other = solve_mfg(model, t, EmpiricalMeasure(xi + h * direction), config, paths=base.dB)
        ratios[float(h)] = _theta_dist(other, base) / (h * dnorm)
    growth = {}
    rms = float(np.sqrt(np.mean(np.sum(xi ** 2, axis=1))))
    for r in norms:
        pts = xi * (r / rms) if rms > 0 else xi
        sol = solve_mfg(model, t, EmpiricalMeasure(pts), config, paths=base.dB)
        growth[float(r)] = _theta_norm(sol) / (1.0 + r)
    vals = list(ratios.values())
    return {
        "difference_ratios": ratios,
        "ratio_variation": (max(vals) - min(vals)) / max(max(vals), 1e-300) if vals else 0.0,
        "growth_ratios": growth,
        "growth_spread": max(growth.values()) / max(min(growth.values()), 1e-300),
    }
