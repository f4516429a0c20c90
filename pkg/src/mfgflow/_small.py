"""Batched linear algebra for the tiny per-particle matrices.

Closed forms for sizes 1 and 2 avoid the per-matrix overhead of the
general LAPACK gufuncs, which dominates at these sizes.
"""
import numpy as np


def solve(A, b):
    """Solve ``A[i] x[i] = b[i]``; ``b`` has shape (N, k) or (N, k, q)."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k = A.shape[-1]
    vec = b.ndim == A.ndim - 1
    bb = b[..., None] if vec else b
    if k == 1:
        out = bb / A[..., :1, :1]
    elif k == 2:
        a, c = A[..., 0, 0, None], A[..., 0, 1, None]
        d, e = A[..., 1, 0, None], A[..., 1, 1, None]
        det = a * e - c * d
        out = np.stack([(e * bb[..., 0, :] - c * bb[..., 1, :]) / det,
                        (a * bb[..., 1, :] - d * bb[..., 0, :]) / det], axis=-2)
    else:
        out = np.linalg.solve(np.broadcast_to(A, bb.shape[:-2] + A.shape[-2:]), bb)
    return out[..., 0] if vec else out


def min_eig_sym(A):
    """Smallest eigenvalue of symmetric matrices, shape (N,)."""
    A = np.asarray(A, dtype=np.float64)
    k = A.shape[-1]
    if k == 1:
        return A[..., 0, 0].copy()
    if k == 2:
        a, c, e = A[..., 0, 0], 0.5 * (A[..., 0, 1] + A[..., 1, 0]), A[..., 1, 1]
        return 0.5 * (a + e) - np.sqrt(0.25 * (a - e) ** 2 + c * c)
    return np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, -1, -2)))[..., 0]
