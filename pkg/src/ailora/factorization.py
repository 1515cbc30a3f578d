"""Principal and minor splits of a weight matrix into balanced low-rank factors.

A split picks r singular triples out of the thin SVD W = U diag(s) V^T and
produces b = U_sel diag(s_sel)^(1/2), a = diag(s_sel)^(1/2) V_sel^T, together
with the dense residual built from the unselected triples. The square root is
shared between the two factors so ||b||_F == ||a||_F; b a + residual gives W
back. The principal kind selects the largest r values, the minor kind the
smallest r of the thin spectrum.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError
from .svd import SvdResult, svd
from .tensor import Matrix, as_matrix


class SplitKind(str, Enum):
    PRINCIPAL = "principal"
    MINOR = "minor"


@dataclass(frozen=True)
class LowRankSplit:
    """Balanced factors (b, a) plus the frozen residual of a weight matrix."""

    b: Matrix
    a: Matrix
    residual: Matrix
    rank: int
    kind: SplitKind


def _check_rank(r: int, k: int) -> int:
    if not isinstance(r, (int, np.integer)) or isinstance(r, bool):
        raise ConfigError(f"rank must be an integer, got {r!r}")
    if r < 1 or r > k:
        raise ConfigError(f"rank must satisfy 1 <= r <= {k}, got {r}")
    return int(r)


def _assemble(d: SvdResult, sel: slice, rest: slice, r: int, kind: SplitKind) -> LowRankSplit:
    root = np.sqrt(d.sigma[sel])
    b = np.ascontiguousarray(d.u[:, sel] * root)
    a = np.ascontiguousarray(root[:, None] * d.v[:, sel].T)
    residual = np.ascontiguousarray((d.u[:, rest] * d.sigma[rest]) @ d.v[:, rest].T)
    return LowRankSplit(b=b, a=a, residual=residual, rank=r, kind=kind)


def split_principal(w, r: int, decomp: SvdResult | None = None) -> LowRankSplit:
    """Split off the r largest singular triples of ``w``.

    ``decomp`` may carry a precomputed SVD of ``w`` to avoid refactorizing
    when several splits of the same matrix are needed.
    """
    w = as_matrix(w)
    r = _check_rank(r, min(w.shape))
    d = decomp if decomp is not None else svd(w)
    return _assemble(d, slice(0, r), slice(r, d.k), r, SplitKind.PRINCIPAL)


def split_minor(w, r: int, decomp: SvdResult | None = None) -> LowRankSplit:
    """Split off the r smallest singular triples of the thin spectrum of ``w``."""
    w = as_matrix(w)
    r = _check_rank(r, min(w.shape))
    d = decomp if decomp is not None else svd(w)
    return _assemble(d, slice(d.k - r, d.k), slice(0, d.k - r), r, SplitKind.MINOR)


def split(w, r: int, kind: SplitKind | str, decomp: SvdResult | None = None) -> LowRankSplit:
    """Dispatch to split_principal or split_minor by kind."""
    kind = SplitKind(kind)
    if kind is SplitKind.PRINCIPAL:
        return split_principal(w, r, decomp)
    return split_minor(w, r, decomp)


def reconstruct(s: LowRankSplit) -> Matrix:
    """Reassemble the source matrix as b a + residual."""
    return as_matrix(s.b @ s.a + s.residual)
