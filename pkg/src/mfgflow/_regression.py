"""Polynomial least-squares regression used for conditional expectations."""
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

GRAM_CUTOFF = 1e-12


class RegressionError(RuntimeError):
    """The regression design stayed rank deficient at every basis degree."""


def _exponents(k, degree):
    rows = [np.zeros(k, dtype=int)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(k), deg):
            e = np.zeros(k, dtype=int)
            for c in combo:
                e[c] += 1
            rows.append(e)
    return np.array(rows, dtype=int).reshape(len(rows), k)


@dataclass(frozen=True)
class PolyBasis:
    """Total-degree monomials of the standardized state.

    Components with (numerically) zero spread are left out, so a cloud
    concentrated at one point yields the constant basis.
    """

    center: np.ndarray
    scale: np.ndarray
    active: tuple
    exponents: np.ndarray
    degree: int

    @classmethod
    def fit(cls, x, degree):
        x = np.asarray(x, dtype=np.float64)
        center = np.mean(x, axis=0)
        spread = np.sqrt(np.mean((x - center) ** 2, axis=0))
        active = tuple(int(c) for c in np.nonzero(spread > 1e-12 * (1.0 + np.abs(center)))[0])
        scale = np.where(spread > 0, spread, 1.0)
        return cls(center, scale, active, _exponents(len(active), degree if active else 0), degree)

    @property
    def size(self):
        return self.exponents.shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.ones((x.shape[0], self.size))
        if not self.active:
            return out
        idx = list(self.active)
        z = (x[:, idx] - self.center[idx]) / self.scale[idx]
        for r, e in enumerate(self.exponents):
            col = out[:, r]
            for c, p in enumerate(e):
                for _ in range(p):
                    col *= z[:, c]
        return out

    def lowered(self):
        return PolyBasis(self.center, self.scale, self.active,
                         _exponents(len(self.active), self.degree - 1), self.degree - 1)


def noise_design(phi, dB):
    """Columns ``[phi, phi * dB_1, ..., phi * dB_w]``."""
    parts = [phi] + [phi * dB[:, j:j + 1] for j in range(dB.shape[1])]
    return np.concatenate(parts, axis=1)


def fit(design, target, cutoff=GRAM_CUTOFF):
    """Least squares through the scaled Gram matrix with an eigenvalue cutoff.

    Parameters
    ----------
    design : ndarray, shape (..., N, p)
    target : ndarray, shape (..., N, r)

    Returns
    -------
    coef : ndarray, shape (..., p, r)
        Coefficients for the unscaled design.
    rank : ndarray of int
        Number of retained eigen-directions per batch entry.

    Notes
    -----
    Columns are scaled to unit root-mean-square before forming the Gram
    matrix. Scaling a design column or the target by a power of two
    therefore scales the coefficients exactly.
    """
    D = np.asarray(design, dtype=np.float64)
    Y = np.asarray(target, dtype=np.float64)
    rms = np.sqrt(np.mean(D * D, axis=-2))
    rms = np.where(rms > 0, rms, 1.0)
    Dn = D / rms[..., None, :]
    G = np.swapaxes(Dn, -1, -2) @ Dn
    rhs = np.swapaxes(Dn, -1, -2) @ Y
    w, V = np.linalg.eigh(G)
    top = np.max(w, axis=-1, keepdims=True)
    keep = w > cutoff * np.maximum(top, 1e-300)
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    coef_n = V @ (inv[..., :, None] * (np.swapaxes(V, -1, -2) @ rhs))
    return coef_n / rms[..., :, None], np.sum(keep, axis=-1)


class Projection:
    """Reusable least-squares projection onto a fixed design.

    Equivalent to ``fit(design, target)`` for every target, with the scaled
    Gram pseudo-inverse computed once.
    """

    def __init__(self, design, cutoff=GRAM_CUTOFF):
        D = np.asarray(design, dtype=np.float64)
        rms = np.sqrt(np.mean(D * D, axis=0))
        self._rms = np.where(rms > 0, rms, 1.0)
        self._DnT = np.ascontiguousarray((D / self._rms).T)
        w, V = np.linalg.eigh(self._DnT @ self._DnT.T)
        keep = w > cutoff * max(float(np.max(w)), 1e-300)
        inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
        self._S = (V * inv) @ V.T
        self.rank = int(np.sum(keep))
        self.size = D.shape[1]

    def coef(self, target):
        """Coefficients for a target of shape (N, r), returned as (p, r)."""
        return (self._S @ (self._DnT @ target)) / self._rms[:, None]
