"""Spectral measurements: stable rank, top-direction alignment, logit margin,
and the sign / norm-restored-sign transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentUndefinedError, DegenerateMatrixError, ShapeError
from .linalg import (
    DEFAULT_RANK_TOL,
    SvdFactors,
    as_matrix,
    frobenius_norm,
    singular_values,
    spectral_norm,
    svd,
)

DEFAULT_DEGENERACY_TOL = 1e-6


def stable_rank(w) -> float:
    """||W||_F^2 / ||W||_2^2; defined as 0 for the zero matrix."""
    mat = as_matrix(w)
    frob = frobenius_norm(mat)
    if frob == 0.0:
        return 0.0
    spec = spectral_norm(mat)
    return frob * frob / (spec * spec)


@dataclass(frozen=True)
class AlignmentResult:
    """|v_{A,1}^T u_{B,1}| plus the relative top-singular-value gaps used to
    decide whether the top directions were well defined."""

    value: float
    a_top_gap: float
    b_top_gap: float
    degenerate: bool


def _top_gap(f: SvdFactors) -> float:
    """Relative gap (s1 - s2) / s1; 1.0 when only one singular value is kept."""
    if f.rank < 2:
        return 1.0
    return float((f.s[0] - f.s[1]) / f.s[0])


def alignment(a, b, degeneracy_tol: float = DEFAULT_DEGENERACY_TOL) -> AlignmentResult:
    """Cosine between A's top right singular vector and B's top left one.

    Flagged degenerate when either operand's top singular value sits within
    degeneracy_tol (relative) of its second, in which case the top vectors
    are numerically arbitrary and the value should not be trusted.
    """
    ma, mb = as_matrix(a), as_matrix(b)
    if ma.shape[1] != mb.shape[0]:
        raise ShapeError(f"product not defined for {ma.shape} x {mb.shape}")
    if not ma.any() or not mb.any():
        raise AlignmentUndefinedError("alignment is undefined for a zero matrix")
    fa, fb = svd(ma), svd(mb)
    value = min(1.0, float(abs(fa.v[:, 0] @ fb.u[:, 0])))
    gap_a, gap_b = _top_gap(fa), _top_gap(fb)
    return AlignmentResult(value, gap_a, gap_b, gap_a < degeneracy_tol or gap_b < degeneracy_tol)


def matrix_sign(w, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """U V^T from the reduced SVD: all nonzero singular values become 1."""
    mat = as_matrix(w)
    if not mat.any():
        raise DegenerateMatrixError("matrix sign of the zero matrix is undefined")
    f = svd(mat, rank_tol)
    return f.u @ f.v.T


def msign_restore(w, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Matrix sign rescaled back to the input's Frobenius norm.

    Every singular value of the result equals ||w||_F / sqrt(rank), which
    maximizes stable rank at fixed rank and Frobenius norm.
    """
    mat = as_matrix(w)
    signed = matrix_sign(mat, rank_tol)
    return (frobenius_norm(mat) / frobenius_norm(signed)) * signed


def logit_margin(s) -> float:
    """Minimum over rows of (max - second max); tied maxima give 0."""
    mat = as_matrix(s)
    if mat.shape[1] < 2:
        raise ShapeError("logit margin needs at least two columns")
    top2 = -np.partition(-mat, 1, axis=1)[:, :2]
    return float((top2[:, 0] - top2[:, 1]).min())


def geo_mean_srank(ws) -> float:
    """exp(mean(log(stable ranks))); every matrix must be nonzero."""
    mats = list(ws)
    if not mats:
        raise ValueError("geometric mean needs at least one matrix")
    logs = []
    for w in mats:
        sr = stable_rank(w)
        if sr == 0.0:
            raise ValueError("geometric-mean stable rank is undefined for a zero matrix")
        logs.append(math.log(sr))
    return math.exp(sum(logs) / len(logs))


@dataclass(frozen=True)
class SpectralReport:
    srank: float
    frob: float
    spec: float
    rank: int

    def to_json(self) -> str:
        """JSON object with 17-significant-digit reals."""
        return (
            '{"srank": %s, "frob": %s, "spec": %s, "rank": %d}'
            % (
                format(self.srank, ".17g"),
                format(self.frob, ".17g"),
                format(self.spec, ".17g"),
                self.rank,
            )
        )


def spectral_report(w, rank_tol: float = DEFAULT_RANK_TOL) -> SpectralReport:
    mat = as_matrix(w)
    frob = frobenius_norm(mat)
    if frob == 0.0:
        return SpectralReport(srank=0.0, frob=0.0, spec=0.0, rank=0)
    s = singular_values(mat)
    spec = float(s[0])
    rank = int(np.count_nonzero(s > rank_tol * s[0]))
    return SpectralReport(srank=frob * frob / (spec * spec), frob=frob, spec=spec, rank=rank)
