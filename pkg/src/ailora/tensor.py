"""Dense 64-bit matrices and elementary linear algebra.

A matrix is a plain 2-D float64 numpy array in row-major (C) order with at
least one row and one column. The functions here validate shapes and
finiteness and never mutate their inputs; hot loops elsewhere use numpy
directly and re-validate at module boundaries.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

Matrix = np.ndarray


def as_matrix(data) -> Matrix:
    """Coerce ``data`` to a finite 2-D float64 row-major array."""
    a = np.ascontiguousarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix contains non-finite entries")
    return a


def _finite(a: Matrix) -> Matrix:
    if not np.all(np.isfinite(a)):
        raise NumericError("operation produced non-finite entries")
    return a


def matmul(a, b) -> Matrix:
    """Standard matrix product a @ b."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _finite(a @ b)


def frobenius_norm(a) -> float:
    """sqrt of the sum of squared entries."""
    return float(np.linalg.norm(as_matrix(a)))


def transpose(a) -> Matrix:
    return np.ascontiguousarray(as_matrix(a).T)


def add(a, b) -> Matrix:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    return _finite(a + b)


def sub(a, b) -> Matrix:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot subtract {b.shape} from {a.shape}")
    return _finite(a - b)


def scale(a, c: float) -> Matrix:
    a = as_matrix(a)
    if not np.isfinite(c):
        raise NumericError(f"scale factor must be finite, got {c}")
    return _finite(a * float(c))
