"""Pure numpy versions of the compiled reductions.

The summation order matches the compiled module exactly, so switching
backends never changes a result bit.
"""
import numpy as np


def _tree_axis0(a):
    while a.shape[0] > 1:
        n = a.shape[0]
        half = n // 2
        s = a[0:2 * half:2] + a[1:2 * half:2]
        if n % 2:
            s = np.concatenate([s, a[n - 1:n]], axis=0)
        a = s
    return a[0]


def tree_sum(a):
    """Sum a 2-D array over its first axis with the fixed pairwise tree.

    Parameters
    ----------
    a : ndarray, shape (m, c)

    Returns
    -------
    ndarray, shape (c,)
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape[0] == 0:
        return np.zeros(a.shape[1])
    return np.array(_tree_axis0(a), dtype=np.float64)


def pair_contract(kern, z):
    """Pairwise contraction ``out[i,p,q] = sum_j sum_e kern[i,j,p,e] z[j,e,q]``.

    Parameters
    ----------
    kern : ndarray, shape (ni, m, p, e)
    z : ndarray, shape (m, e, q)

    Returns
    -------
    ndarray, shape (ni, p, q)
    """
    kern = np.asarray(kern, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    ni, m, P, E = kern.shape
    Q = z.shape[2]
    if m == 0:
        return np.zeros((ni, P, Q))
    # e-sum in ascending order, one term at a time
    prod = kern[:, :, :, 0, None] * z[None, :, None, 0, :]
    for e in range(1, E):
        prod = prod + kern[:, :, :, e, None] * z[None, :, None, e, :]
    # prod: (ni, m, P, Q); tree over j for every i
    moved = np.moveaxis(prod, 1, 0).reshape(m, ni * P * Q)
    return _tree_axis0(moved).reshape(ni, P, Q).copy()
