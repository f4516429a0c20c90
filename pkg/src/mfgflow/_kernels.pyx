# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled reductions over the particle axis.

Both routines sum in the same order as the numpy fallback in
``_kernels_py``: adjacent pairs are added level by level and an odd
trailing row is carried up unchanged. Results are therefore
bit-identical between the two backends.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _tree_inplace(double[:, ::1] buf, Py_ssize_t rows) noexcept nogil:
    cdef Py_ssize_t n = rows, half, i, c, cols = buf.shape[1]
    while n > 1:
        half = n // 2
        for i in range(half):
            for c in range(cols):
                buf[i, c] = buf[2 * i, c] + buf[2 * i + 1, c]
        if n % 2 == 1:
            for c in range(cols):
                buf[half, c] = buf[n - 1, c]
            n = half + 1
        else:
            n = half


def tree_sum(a):
    """Sum a 2-D array over its first axis with the fixed pairwise tree.

    Parameters
    ----------
    a : ndarray, shape (m, c)

    Returns
    -------
    ndarray, shape (c,)
    """
    cdef double[:, ::1] buf = np.array(a, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t rows = buf.shape[0]
    if rows == 0:
        return np.zeros(buf.shape[1])
    with nogil:
        _tree_inplace(buf, rows)
    return np.asarray(buf[0]).copy()


def pair_contract(kern, z):
    """Pairwise contraction ``out[i,p,q] = sum_j sum_e kern[i,j,p,e] z[j,e,q]``.

    The sum over ``e`` runs in ascending order; the sum over ``j`` uses the
    pairwise tree.

    Parameters
    ----------
    kern : ndarray, shape (ni, m, p, e)
    z : ndarray, shape (m, e, q)

    Returns
    -------
    ndarray, shape (ni, p, q)
    """
    cdef const double[:, :, :, ::1] K = np.ascontiguousarray(kern, dtype=np.float64)
    cdef const double[:, :, ::1] Z = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t ni = K.shape[0], m = K.shape[1], P = K.shape[2], E = K.shape[3]
    cdef Py_ssize_t Q = Z.shape[2]
    cdef Py_ssize_t i, j, p, e, q
    cdef double acc
    out = np.zeros((ni, P, Q))
    cdef double[:, :, ::1] O = out
    if m == 0:
        return out
    cdef double[:, ::1] buf = np.empty((m, P * Q))
    with nogil:
        for i in range(ni):
            for j in range(m):
                for p in range(P):
                    for q in range(Q):
                        acc = K[i, j, p, 0] * Z[j, 0, q]
                        for e in range(1, E):
                            acc = acc + K[i, j, p, e] * Z[j, e, q]
                        buf[j, p * Q + q] = acc
            _tree_inplace(buf, m)
            for p in range(P):
                for q in range(Q):
                    O[i, p, q] = buf[0, p * Q + q]
    return out
