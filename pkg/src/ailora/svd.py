"""Deterministic thin SVD of dense matrices via one-sided Jacobi rotations.

The factorization W = U diag(sigma) V^T is computed by cyclically
orthogonalizing the columns of W (rows of its transpose, kept row-contiguous
for the kernels). A cached Gram matrix decides which column pairs still need
rotating; it is refreshed from scratch at the start of every sweep, and the
algorithm stops at the first sweep that performs no rotation. Rotation order,
sign convention, and tie handling are all fixed, so identical input bytes
always produce identical factors.

One-sided Jacobi retains high relative accuracy in the small singular values,
which the minor-split initializers downstream depend on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import NumericError
from .tensor import Matrix, as_matrix

TOLERANCE = 1e-14
MAX_SWEEPS = 60

# norms at or below the smallest normal double are treated as exact zeros
_TINY = float(np.finfo(np.float64).tiny)


@njit(cache=True)
def _gram(rows):
    """Symmetric matrix of pairwise row dot products."""
    n, m = rows.shape
    g = np.empty((n, n))
    for p in range(n):
        for q in range(p, n):
            s = 0.0
            for j in range(m):
                s += rows[p, j] * rows[q, j]
            g[p, q] = s
            g[q, p] = s
    return g


@njit(cache=True)
def _sweep(rows, vrows, g, tol2):
    """One cyclic pass of plane rotations over all row pairs.

    Rotates ``rows`` (columns of the matrix being decomposed), accumulates the
    same rotations into ``vrows``, and patches the Gram matrix ``g`` in place.
    A pair (p, q) is skipped when g[p,q]^2 <= tol2 * g[p,p] * g[q,q]. Returns
    the number of rotations applied.
    """
    n, m = rows.shape
    nv = vrows.shape[1]
    rotations = 0
    for p in range(n - 1):
        for q in range(p + 1, n):
            gpq = g[p, q]
            if gpq * gpq <= tol2 * g[p, p] * g[q, q]:
                continue
            tau = (g[q, q] - g[p, p]) / (2.0 * gpq)
            if tau >= 0.0:
                t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
            else:
                t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for j in range(m):
                x = rows[p, j]
                y = rows[q, j]
                rows[p, j] = c * x - s * y
                rows[q, j] = s * x + c * y
            for j in range(nv):
                x = vrows[p, j]
                y = vrows[q, j]
                vrows[p, j] = c * x - s * y
                vrows[q, j] = s * x + c * y
            for j in range(n):
                x = g[p, j]
                y = g[q, j]
                g[p, j] = c * x - s * y
                g[q, j] = s * x + c * y
            for j in range(n):
                x = g[j, p]
                y = g[j, q]
                g[j, p] = c * x - s * y
                g[j, q] = s * x + c * y
            g[p, q] = 0.0
            g[q, p] = 0.0
            rotations += 1
    return rotations


def _max_offdiag_ratio(g) -> float:
    d = np.sqrt(np.maximum(np.diag(g).copy(), 0.0))
    denom = np.outer(d, d)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.abs(g) / denom
    r[~np.isfinite(r)] = 0.0
    np.fill_diagonal(r, 0.0)
    return float(r.max())


def _complete_column(u: Matrix, i: int) -> np.ndarray:
    """Unit vector orthogonal to the first ``i`` columns of ``u``.

    Used for singular values that are exactly zero, where the rotated column
    carries no usable direction. Starts from the canonical basis vector least
    represented in the established columns (ties -> lowest index) and
    re-orthogonalizes twice.
    """
    m = u.shape[0]
    established = u[:, :i]
    load = np.einsum("ij,ij->i", established, established)
    e = np.zeros(m)
    e[int(np.argmin(load))] = 1.0
    for _ in range(2):
        e -= established @ (established.T @ e)
    nrm = float(np.linalg.norm(e))
    if nrm < 1e-6:
        raise NumericError("failed to complete an orthonormal basis for a zero singular value")
    return e / nrm


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD factors: u (m x k), sigma (length k, descending), v (n x k)."""

    u: Matrix
    sigma: np.ndarray
    v: Matrix

    @property
    def k(self) -> int:
        return int(self.sigma.shape[0])


def svd(w) -> SvdResult:
    """Thin singular value decomposition of ``w``.

    Returns factors with orthonormal columns and singular values sorted in
    descending order (equal values keep their pre-sort relative order). Signs
    are fixed so the largest-magnitude entry of each u column is positive,
    ties broken by lowest row index. Raises NumericError if the sweep limit
    is reached before the Gram matrix is fully diagonalized.
    """
    w = as_matrix(w)
    m, n = w.shape
    transposed = m < n
    a = w.T if transposed else w
    at = a.T.copy()  # the kernels rotate this in place; never alias the input
    k = at.shape[0]
    vt = np.eye(k)
    tol2 = TOLERANCE * TOLERANCE
    converged = False
    for _ in range(MAX_SWEEPS):
        g = _gram(at)
        if _sweep(at, vt, g, tol2) == 0:
            converged = True
            break
    if not converged:
        ratio = _max_offdiag_ratio(_gram(at))
        raise NumericError(
            f"one-sided jacobi did not converge in {MAX_SWEEPS} sweeps "
            f"(worst off-diagonal ratio {ratio:.3e})"
        )

    norms = np.sqrt(np.einsum("ij,ij->i", at, at))
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order]
    u = np.empty((at.shape[1], k))
    for i, idx in enumerate(order):
        if sigma[i] > _TINY:
            u[:, i] = at[idx] / sigma[i]
        else:
            sigma[i] = 0.0
            u[:, i] = _complete_column(u, i)
    v = vt[order].T

    if transposed:
        u, v = v, u
    for i in range(k):
        col = u[:, i]
        j = int(np.argmax(np.abs(col)))
        if col[j] < 0.0:
            u[:, i] = -col
            v[:, i] = -v[:, i]

    u = np.ascontiguousarray(u)
    v = np.ascontiguousarray(v)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(sigma)) and np.all(np.isfinite(v))):
        raise NumericError("svd produced non-finite factors")
    return SvdResult(u=u, sigma=sigma, v=v)
