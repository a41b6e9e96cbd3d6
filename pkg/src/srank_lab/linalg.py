"""Dense float64 linear algebra with a deterministic one-sided Jacobi SVD.

Matrices are plain 2-D float64 numpy arrays, validated at entry and treated
as immutable. Every routine is a pure function with a fixed operation order,
so identical inputs always produce bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_RANK_TOL = 1e-12

# One-sided Jacobi: a column pair is considered orthogonal once its cosine
# drops below _PAIR_TOL; a sweep that rotates nothing terminates the loop.
_PAIR_TOL = 1e-14
_MAX_SWEEPS = 60
_OFF_DIAG_TOL = 1e-12

_SCHEDULE_CACHE: dict[int, list] = {}


def as_matrix(a) -> np.ndarray:
    """Validate `a` as a finite 2-D float64 matrix with positive dimensions."""
    mat = np.asarray(a, dtype=np.float64)
    if mat.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={mat.ndim}")
    if mat.shape[0] < 1 or mat.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix entries must be finite")
    return mat


def matmul(a, b) -> np.ndarray:
    """Dense product a @ b."""
    ma, mb = as_matrix(a), as_matrix(b)
    if ma.shape[1] != mb.shape[0]:
        raise ShapeError(f"cannot multiply {ma.shape} by {mb.shape}")
    return ma @ mb


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def frobenius_norm(a) -> float:
    mat = as_matrix(a)
    return float(np.sqrt(np.einsum("ij,ij->", mat, mat)))


def _check_rank_tol(rank_tol):
    if not 0.0 < rank_tol < 1.0:
        raise ValueError(f"rank_tol must lie in (0, 1), got {rank_tol}")


def _round_robin_rounds(n: int):
    """Fixed round-robin schedule: n-1 rounds of disjoint column pairs."""
    if n in _SCHEDULE_CACHE:
        return _SCHEDULE_CACHE[n]
    m = n if n % 2 == 0 else n + 1  # pad odd n with a dummy column
    arr = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            lo, hi = arr[i], arr[m - 1 - i]
            if lo < n and hi < n:
                ps.append(min(lo, hi))
                qs.append(max(lo, hi))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        arr = [arr[0], arr[-1]] + arr[1:-1]
    _SCHEDULE_CACHE[n] = rounds
    return rounds


def _relative_off_diagonal(work) -> float:
    gram = work.T @ work
    diag = float(np.trace(np.abs(gram)))
    off = float((np.abs(gram).sum() - np.trace(np.abs(gram))) / 2.0)
    if diag <= 0.0:
        return 0.0
    return off / diag


def _jacobi_orthogonalize(a: np.ndarray, want_v: bool):
    """Rotate a copy of `a` until its columns are mutually orthogonal.

    Returns (rotated, v) with rotated == a @ v. Pairs within a round are
    disjoint, so the vectorized simultaneous rotations are exactly equivalent
    to applying them sequentially; the schedule is fixed, which makes the
    whole factorization deterministic. Raises NumericError if the relative
    off-diagonal mass still exceeds tolerance after the sweep cap.
    """
    m, n = a.shape
    work = a.copy()
    v = np.eye(n) if want_v else None
    if n == 1:
        return work, v
    rounds = _round_robin_rounds(n)
    norms2 = np.einsum("ij,ij->j", work, work)
    for _ in range(_MAX_SWEEPS):
        rotated_any = False
        for ps, qs in rounds:
            p_cols = work[:, ps]
            q_cols = work[:, qs]
            gamma = np.einsum("ij,ij->j", p_cols, q_cols)
            alpha = norms2[ps]
            beta = norms2[qs]
            needs = (gamma * gamma > (_PAIR_TOL * _PAIR_TOL) * alpha * beta) & (gamma != 0.0)
            if not needs.any():
                continue
            rotated_any = True
            idx = np.nonzero(needs)[0]
            g = gamma[idx]
            zeta = (beta[idx] - alpha[idx]) / (2.0 * g)
            # hypot avoids overflow of zeta**2 for nearly-converged pairs
            t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            pi = ps[idx]
            qi = qs[idx]
            pc = work[:, pi]
            qc = work[:, qi]
            work[:, pi] = c * pc - s * qc
            work[:, qi] = s * pc + c * qc
            # Exact norm updates for the rotated pairs; pairs are disjoint,
            # so no other rotation in this round touches these columns. The
            # clamp guards against tiny negative values from cancellation.
            norms2[pi] = np.maximum(alpha[idx] - t * g, 0.0)
            norms2[qi] = np.maximum(beta[idx] + t * g, 0.0)
            if want_v:
                pv = v[:, pi]
                qv = v[:, qi]
                v[:, pi] = c * pv - s * qv
                v[:, qi] = s * pv + c * qv
        if not rotated_any:
            return work, v
    rel = _relative_off_diagonal(work)
    if rel > _OFF_DIAG_TOL:
        raise NumericError(
            f"jacobi svd did not converge within {_MAX_SWEEPS} sweeps "
            f"(relative off-diagonal {rel:.3e})",
            residual=rel,
        )
    return work, v


@dataclass(frozen=True)
class SvdFactors:
    """Reduced SVD: u (m x r), descending positive s (r,), v (n x r)."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    rank: int

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def svd(a, rank_tol: float = DEFAULT_RANK_TOL) -> SvdFactors:
    """Reduced SVD via one-sided Jacobi rotations in cyclic sweeps.

    Singular values at or below rank_tol * s_max are dropped. The sign of
    each u column is fixed so its largest-magnitude entry is positive (ties
    broken by lowest row index).
    """
    mat = as_matrix(a)
    _check_rank_tol(rank_tol)
    m, n = mat.shape
    amax = float(np.abs(mat).max())
    if amax == 0.0:
        return SvdFactors(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)), 0)
    transposed = m < n
    work_in = (mat.T if transposed else mat) / amax
    rotated, v = _jacobi_orthogonalize(work_in, want_v=True)
    s = np.sqrt(np.einsum("ij,ij->j", rotated, rotated))
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    r = int(np.count_nonzero(s_sorted > rank_tol * s_sorted[0]))
    s_kept = s_sorted[:r]
    u = rotated[:, order[:r]] / s_kept
    v_kept = v[:, order[:r]]
    if transposed:
        u, v_kept = v_kept, u
    for j in range(r):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0.0:
            u[:, j] *= -1.0
            v_kept[:, j] *= -1.0
    return SvdFactors(u=u, s=s_kept * amax, v=v_kept, rank=r)


def singular_values(a) -> np.ndarray:
    """All min(m, n) singular values, descending (zeros included).

    Tracks only the rotated columns (no singular vectors), following the
    exact rotation sequence of svd(), so the values are bit-identical to
    the factorization's.
    """
    mat = as_matrix(a)
    amax = float(np.abs(mat).max())
    if amax == 0.0:
        return np.zeros(min(mat.shape))
    work_in = (mat.T if mat.shape[0] < mat.shape[1] else mat) / amax
    rotated, _ = _jacobi_orthogonalize(work_in, want_v=False)
    s = np.sqrt(np.einsum("ij,ij->j", rotated, rotated))
    return s[np.argsort(-s, kind="stable")] * amax


def spectral_norm(a) -> float:
    """Largest singular value; 0 for the zero matrix."""
    s = singular_values(a)
    return float(s[0]) if s.size else 0.0


def numeric_rank(a, rank_tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above rank_tol * s_max; 0 for the zero matrix."""
    _check_rank_tol(rank_tol)
    s = singular_values(a)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rank_tol * s[0]))


def write_matrix_text(path, a) -> None:
    """Write the text form: "rows cols" line, then one space-separated row
    per line with full 17-significant-digit decimals."""
    mat = as_matrix(a)
    lines = [f"{mat.shape[0]} {mat.shape[1]}"]
    for row in mat:
        lines.append(" ".join(format(x, ".17g") for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_matrix_text(path) -> np.ndarray:
    """Read a matrix written by write_matrix_text."""
    raw = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not raw:
        raise ShapeError(f"{path}: empty matrix file")
    header = raw[0].split()
    if len(header) != 2:
        raise ShapeError(f"{path}: malformed header {raw[0]!r}")
    rows, cols = int(header[0]), int(header[1])
    if len(raw) - 1 != rows:
        raise ShapeError(f"{path}: expected {rows} rows, found {len(raw) - 1}")
    data = np.empty((rows, cols))
    for i, line in enumerate(raw[1:]):
        vals = line.split()
        if len(vals) != cols:
            raise ShapeError(f"{path}: row {i} has {len(vals)} entries, expected {cols}")
        data[i] = [float(x) for x in vals]
    return as_matrix(data)
