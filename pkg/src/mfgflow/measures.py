"""Empirical measures, Wasserstein diagnostics and independent-copy expectations.

Every reduction over particles goes through :func:`cloud_sum`, which sorts
the rows lexicographically and then adds them with a fixed pairwise tree.
The result does not depend on the order in which particles are stored.
"""
from dataclasses import dataclass

import numpy as np

from ._backend import pair_contract, tree_sum

PAIRWISE_LIMIT = 4096
SLICED_PROJECTIONS = 64


class MeasureError(ValueError):
    """Invalid particle cloud or incompatible clouds."""


class ModelEvaluationError(ValueError):
    """A user-supplied functional returned a non-finite value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


def _rows(values):
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    return v.reshape(v.shape[0], -1)


def lex_order(keys):
    """Row order sorting ``keys`` lexicographically (first column most significant)."""
    k = _rows(keys)
    if k.shape[0] <= 1:
        return np.arange(k.shape[0])
    return np.lexsort(k.T[::-1])


def cloud_sum(values, keys=None):
    """Sum ``values`` over the leading axis in a permutation-invariant order.

    Parameters
    ----------
    values : array_like, shape (N, ...)
    keys : array_like, shape (N, ...), optional
        Sort keys. Rows are sorted by ``keys`` first and ties are broken by
        ``values``; when omitted the values themselves are the keys.

    Returns
    -------
    ndarray, shape (...)
    """
    v = np.asarray(values, dtype=np.float64)
    tail = v.shape[1:]
    flat = v.reshape(v.shape[0], -1)
    k = flat if keys is None else np.hstack([_rows(keys), flat])
    order = lex_order(k)
    return tree_sum(flat[order]).reshape(tail)


def cloud_mean(values, keys=None):
    v = np.asarray(values, dtype=np.float64)
    return cloud_sum(v, keys) / v.shape[0]


class EmpiricalMeasure:
    """Uniform particle cloud on R^n.

    Parameters
    ----------
    particles : array_like, shape (N, n) or (N,)
        One-dimensional input is read as N points on the line.
    """

    def __init__(self, particles):
        x = np.array(particles, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise MeasureError("empirical measure needs at least one particle")
        if not np.all(np.isfinite(x)):
            bad = int(np.argwhere(~np.isfinite(x))[0, 0])
            raise MeasureError(f"particle {bad} is not finite")
        x.setflags(write=False)
        self.particles = x
        self._order = None
        self._mean = None
        self._m2 = None

    @property
    def n(self):
        return self.particles.shape[1]

    @property
    def size(self):
        return self.particles.shape[0]

    def __len__(self):
        return self.particles.shape[0]

    @property
    def order(self):
        if self._order is None:
            self._order = lex_order(self.particles)
        return self._order

    def expect(self, values):
        """Average per-particle ``values`` (aligned with the stored particles)."""
        v = np.asarray(values, dtype=np.float64)
        flat = v.reshape(v.shape[0], -1)
        keyed = np.hstack([self.particles, flat])
        order = lex_order(keyed)
        return (tree_sum(flat[order]) / v.shape[0]).reshape(v.shape[1:])

    @property
    def mean(self):
        if self._mean is None:
            self._mean = tree_sum(self.particles[self.order]) / self.size
        return self._mean

    @property
    def second_moment(self):
        if self._m2 is None:
            sq = np.sum(self.particles ** 2, axis=1)[:, None]
            self._m2 = float(tree_sum(sq[self.order])[0] / self.size)
        return self._m2


def as_measure(m):
    return m if isinstance(m, EmpiricalMeasure) else EmpiricalMeasure(m)


def second_moment(m):
    return as_measure(m).second_moment


def w2_to_dirac(m):
    """Distance from the cloud to the Dirac mass at the origin.

    Parameters
    ----------
    m : EmpiricalMeasure or array_like

    Returns
    -------
    float
    """
    if not isinstance(m, EmpiricalMeasure):
        arr = np.asarray(m, dtype=np.float64)
        if arr.size == 0:
            raise MeasureError("empty cloud")
        m = EmpiricalMeasure(arr)
    return float(np.sqrt(m.second_moment))


@dataclass(frozen=True)
class W2Result:
    value: float
    exact: bool
    projections: int = 0

    def __float__(self):
        return self.value


def _w2_sorted_1d(a, b):
    a = np.sort(a)
    b = np.sort(b)
    if a.size == b.size:
        d = (a - b) ** 2
        return float(np.sqrt(tree_sum(d[:, None])[0] / a.size))
    # general sizes: integrate squared quantile differences over merged levels
    qa = np.arange(1, a.size + 1) / a.size
    qb = np.arange(1, b.size + 1) / b.size
    levels = np.union1d(qa, qb)
    widths = np.diff(np.concatenate([[0.0], levels]))
    mids = levels - 0.5 * widths
    ia = np.minimum(np.floor(mids * a.size).astype(int), a.size - 1)
    ib = np.minimum(np.floor(mids * b.size).astype(int), b.size - 1)
    d = widths * (a[ia] - b[ib]) ** 2
    return float(np.sqrt(tree_sum(d[:, None])[0]))


def w2_empirical(m, m2, projections=SLICED_PROJECTIONS, seed=0):
    """Wasserstein-2 distance between two clouds.

    Exact by sorted matching on the line; a sliced estimate with
    ``projections`` random directions otherwise.

    Returns
    -------
    W2Result
    """
    m = as_measure(m)
    m2 = as_measure(m2)
    if m.n != m2.n:
        raise MeasureError(f"dimension mismatch: {m.n} vs {m2.n}")
    if m.n == 1:
        return W2Result(_w2_sorted_1d(m.particles[:, 0], m2.particles[:, 0]), True, 0)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((projections, m.n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for u in dirs:
        total += _w2_sorted_1d(m.particles @ u, m2.particles @ u) ** 2
    return W2Result(float(np.sqrt(total / projections)), False, projections)


def gateaux_from_lfd(lfd_grad, m):
    """Evaluate ``y -> D_y dk/dnu(m)(y)`` at every particle of ``m``.

    This is the Gateaux derivative of the lifted functional
    ``K(X) = k(law(X))`` in the direction of each particle.

    Parameters
    ----------
    lfd_grad : callable
        ``lfd_grad(m, y)`` with ``y`` of shape (N, n), returning (N, n).
    m : EmpiricalMeasure

    Returns
    -------
    ndarray, shape (N, n)
    """
    m = as_measure(m)
    out = np.asarray(lfd_grad(m, m.particles), dtype=np.float64).reshape(m.size, m.n)
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ModelEvaluationError(f"non-finite derivative at particle {i}", index=i)
    return out


class IndependentCopyContext:
    """Expectations over an independent copy drawn from a particle cloud.

    ``expect(kernel, z)`` returns, for every base point ``i``,
    ``(1/M) sum_j sum_e kernel[i, j, ..., e] z[j, e, ...]``. Kernels that are
    constant along the copy axis (singleton axis 1) reduce ``z`` once; other
    kernels are contracted pair by pair.

    Parameters
    ----------
    copies : array_like, shape (M, n)
        Positions of the copy cloud.
    pairwise_limit : int
        Above this size the copy cloud is thinned by ``stride``.
    stride : int, optional
        Subsampling stride; defaults to ``ceil(M / pairwise_limit)``.
    chunk : int
        Upper bound on kernel entries materialized at once.
    """

    def __init__(self, copies, pairwise_limit=PAIRWISE_LIMIT, stride=None, chunk=1 << 22):
        y = _rows(copies)
        self.full_size = y.shape[0]
        if stride is None:
            stride = 1 if y.shape[0] <= pairwise_limit else int(np.ceil(y.shape[0] / pairwise_limit))
        self.stride = max(1, int(stride))
        self.index = np.arange(0, y.shape[0], self.stride)
        self.points = y[self.index]
        self.chunk = int(chunk)
        self._order = lex_order(self.points)
        srt = self.points[self._order]
        self._distinct = bool(np.all(np.any(np.diff(srt, axis=0) != 0, axis=1))) if len(srt) > 1 else True

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def subsampled(self):
        return self.stride > 1

    def _perm(self, zflat):
        if self._distinct:
            return self._order
        return lex_order(np.hstack([self.points, zflat]))

    def mean(self, z):
        """Plain average of per-copy values in the fixed order."""
        z = np.asarray(z, dtype=np.float64)[self.index] if np.shape(z)[0] == self.full_size else np.asarray(z, dtype=np.float64)
        flat = z.reshape(z.shape[0], -1)
        perm = self._perm(flat)
        return (tree_sum(flat[perm]) / z.shape[0]).reshape(z.shape[1:])

    def expect(self, kernel, z, base_size=None):
        """Contract ``kernel`` against per-copy values ``z`` and average.

        Parameters
        ----------
        kernel : ndarray or callable
            Array broadcastable to (N, M, *P, E), or a callable
            ``kernel(rows, ypts)`` returning such an array for a slice of base
            rows and the (thinned) copy positions.
        z : ndarray, shape (M, E) or (M, E, Q)
            Per-copy values aligned with the full copy cloud.
        base_size : int, optional
            Number of base points, needed when ``kernel`` is callable.

        Returns
        -------
        ndarray, shape (N or 1, *P) or (N or 1, *P, Q)
        """
        z = np.asarray(z, dtype=np.float64)
        if z.shape[0] == self.full_size and self.stride > 1:
            z = z[self.index]
        vector = z.ndim == 2
        if vector:
            z = z[:, :, None]
        M, E, Q = z.shape
        perm = self._perm(z.reshape(M, -1))
        zs = np.ascontiguousarray(z[perm])

        if callable(kernel):
            probe = np.asarray(kernel(slice(0, 1), self.points[:2]))
            constant_j = probe.shape[1] == 1
            if constant_j:
                kern = np.asarray(kernel(slice(None), self.points[:1]))
                return self._finish(self._reduce_constant(kern, zs), vector)
            N = int(base_size)
            ypts = self.points[perm]
            width = max(1, probe.size // max(probe.shape[0] * probe.shape[1], 1))
            step = max(1, self.chunk // max(M * width, 1))
            parts = []
            for a in range(0, N, step):
                kern = np.asarray(kernel(slice(a, min(N, a + step)), ypts))
                parts.append(self._reduce_pairs(kern, zs, presorted=True))
            return self._finish(np.concatenate(parts, axis=0), vector)

        kern = np.asarray(kernel, dtype=np.float64)
        if kern.ndim < 3:
            raise ValueError("kernel needs axes (base, copy, ..., contraction)")
        if kern.shape[1] == 1:
            return self._finish(self._reduce_constant(kern, zs), vector)
        kern = kern[:, perm] if kern.shape[1] == M else kern
        return self._finish(self._reduce_pairs(kern, zs, presorted=True), vector)

    @staticmethod
    def _finish(out, vector):
        return out[..., 0] if vector else out

    @staticmethod
    def _reduce_constant(kern, zs):
        M, E, Q = zs.shape
        zbar = (tree_sum(zs.reshape(M, E * Q)) / M).reshape(E, Q)
        k = kern[:, 0]
        lead = k.shape[:-1]
        k2 = k.reshape(-1, E)
        out = k2[:, 0, None] * zbar[0][None, :]
        for e in range(1, E):
            out = out + k2[:, e, None] * zbar[e][None, :]
        return out.reshape(lead + (Q,))

    @staticmethod
    def _reduce_pairs(kern, zs, presorted):
        M, E, Q = zs.shape
        ni = kern.shape[0]
        mid = kern.shape[2:-1]
        k4 = np.broadcast_to(kern, (ni, M) + kern.shape[2:]).reshape(ni, M, -1, E)
        out = pair_contract(np.ascontiguousarray(k4), zs) / M
        return out.reshape((ni,) + mid + (Q,))
