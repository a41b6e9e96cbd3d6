"""Executable validators for the spectral inequalities behind gradient blowup.

Each check measures a left-hand side numerically and compares it with the
corresponding proven bound. Whenever a check's preconditions hold, satisfied
must come back True; a False is evidence of a bug in the linear algebra
underneath, not of a false theorem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .activations import ACTIVATIONS, LIPSCHITZ, row_softmax
from .errors import ConstructionError, DegenerateMatrixError, PreconditionError, ShapeError
from .fd import central_diff_jacobian
from .linalg import as_matrix, frobenius_norm, spectral_norm, svd
from .spectral import DEFAULT_DEGENERACY_TOL, _top_gap, logit_margin, stable_rank

FD_STEP_MIN = 1e-7
FD_STEP_MAX = 1e-3
# A finite-difference lhs is trusted only if halving the step moves it by
# less than this relative amount; otherwise the instance is excluded.
FD_AGREEMENT_RTOL = 1e-3

# Slack applied when re-measuring preconditions (targets are met by
# construction; recovered singular vectors carry ~1e-14 noise).
_MEASURE_SLACK = 1e-9


@dataclass(frozen=True)
class BoundCheck:
    """Outcome of one inequality or identity check.

    slack is lhs - rhs for lower bounds and rhs - lhs for upper bounds, so
    satisfied <=> slack >= -abs_tol with abs_tol = 1e-9 * max(|lhs|, |rhs|, 1).
    skipped marks instances excluded before evaluation (degenerate alignment
    or unreliable finite differences); skipped checks count as satisfied.
    """

    lhs: float
    rhs: float
    satisfied: bool
    slack: float
    context: str
    skipped: bool = False

    @staticmethod
    def _abs_tol(lhs: float, rhs: float) -> float:
        return 1e-9 * max(abs(lhs), abs(rhs), 1.0)

    @classmethod
    def lower(cls, lhs: float, rhs: float, context: str) -> "BoundCheck":
        slack = lhs - rhs
        return cls(lhs, rhs, slack >= -cls._abs_tol(lhs, rhs), slack, context)

    @classmethod
    def upper(cls, lhs: float, rhs: float, context: str) -> "BoundCheck":
        slack = rhs - lhs
        return cls(lhs, rhs, slack >= -cls._abs_tol(lhs, rhs), slack, context)

    @classmethod
    def identity(cls, lhs: float, rhs: float, rel_tol: float, context: str) -> "BoundCheck":
        scale = max(abs(lhs), abs(rhs), 1e-300)
        slack = rel_tol * scale - abs(lhs - rhs)
        return cls(lhs, rhs, slack >= -cls._abs_tol(lhs, rhs), slack, context)

    @classmethod
    def skip(cls, context: str) -> "BoundCheck":
        return cls(math.nan, math.nan, True, math.nan, context, skipped=True)


def check_alignment_product(a, b) -> BoundCheck:
    """||AB||_2 >= ||A||_2 ||B||_2 * Align(A, B) for non-degenerate pairs."""
    ma, mb = as_matrix(a), as_matrix(b)
    if ma.shape[1] != mb.shape[0]:
        raise ShapeError(f"product not defined for {ma.shape} x {mb.shape}")
    if not ma.any() or not mb.any():
        raise DegenerateMatrixError("alignment product bound needs nonzero operands")
    fa, fb = svd(ma), svd(mb)
    if _top_gap(fa) < DEFAULT_DEGENERACY_TOL or _top_gap(fb) < DEFAULT_DEGENERACY_TOL:
        return BoundCheck.skip("alignment_product: degenerate top singular pair")
    align_value = min(1.0, float(abs(fa.v[:, 0] @ fb.u[:, 0])))
    lhs = spectral_norm(ma @ mb)
    rhs = float(fa.s[0]) * float(fb.s[0]) * align_value
    return BoundCheck.lower(lhs, rhs, "alignment_product")


def check_jacobian_product(js, a: float, m: float) -> BoundCheck:
    """||J_L ... J_1||_2 >= (a m)^L / a for chains with alignment >= a, norms >= m.

    js is ordered first-applied first: js[0] is the innermost factor.
    """
    mats = [as_matrix(j) for j in js]
    if not mats:
        raise PreconditionError("jacobian chain is empty")
    if not 0.0 < a <= 1.0:
        raise PreconditionError(f"alignment floor a must lie in (0, 1], got {a}")
    if m <= 0.0:
        raise PreconditionError(f"norm floor m must be positive, got {m}")
    for i, (lo, hi) in enumerate(zip(mats, mats[1:])):
        if hi.shape[1] != lo.shape[0]:
            raise ShapeError(f"factors {i + 1} and {i} are not composable")
    factors = [svd(j) for j in mats]
    for i, f in enumerate(factors):
        if f.rank == 0 or float(f.s[0]) < m * (1.0 - _MEASURE_SLACK):
            raise PreconditionError(
                f"factor {i} has spectral norm {0.0 if f.rank == 0 else float(f.s[0])!r} < m={m}"
            )
    for i in range(len(mats) - 1):
        measured = abs(float(factors[i + 1].v[:, 0] @ factors[i].u[:, 0]))
        if measured < a * (1.0 - _MEASURE_SLACK):
            raise PreconditionError(
                f"adjacent pair ({i + 1}, {i}) has alignment {measured!r} < a={a}"
            )
    prod = mats[0]
    for j in mats[1:]:
        prod = j @ prod
    lhs = spectral_norm(prod)
    depth = len(mats)
    rhs = (a * m) ** depth / a
    return BoundCheck.lower(lhs, rhs, f"jacobian_product depth={depth}")


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.sqrt(vec @ vec)


def _complete_basis(first: np.ndarray, rng) -> np.ndarray:
    """Orthonormal basis whose first column is the given unit vector."""
    dim = first.size
    basis = np.empty((dim, dim))
    basis[:, 0] = first
    k = 1
    while k < dim:
        cand = rng.normal(size=dim)
        for j in range(k):
            cand -= (cand @ basis[:, j]) * basis[:, j]
        norm = np.sqrt(cand @ cand)
        if norm > 1e-8:
            basis[:, k] = cand / norm
            k += 1
    return basis


def alignment_chain_builder(depth: int, dim: int, a_target: float, m_target: float, seed: int):
    """Jacobian chain whose adjacent alignments and spectral norms meet targets.

    Each factor's dominant input direction is the previous factor's dominant
    output direction rotated by acos(a_target), with the rotation taken into
    a direction outside the previous factor's range: unless a_target == 1,
    every factor's smallest singular value is zeroed and the mixing happens
    into that left-null direction. The dominant path then composes without
    interference from the trailing spectrum, which keeps the product bound
    honest for arbitrary depth (fully random mixing does not). Trailing
    singular values stay at most 0.6x the top one so the measured top pair
    is unambiguous; the top value and the mixing cosine carry a 1e-9
    relative overshoot so measured quantities clear the targets strictly.
    """
    if depth < 1 or dim < 2:
        raise ConstructionError(f"need depth >= 1 and dim >= 2, got {depth}, {dim}")
    if not 0.0 < a_target <= 1.0:
        raise ConstructionError(f"a_target must lie in (0, 1], got {a_target}")
    if m_target <= 0.0:
        raise ConstructionError(f"m_target must be positive, got {m_target}")
    rng = np.random.Generator(np.random.PCG64(seed))
    overshoot = 1.0 + 1e-9
    cosine = min(1.0, a_target * overshoot)
    full_rank = cosine >= 1.0
    sine = 0.0 if full_rank else math.sqrt(1.0 - cosine * cosine)
    chain = []
    prev_u = None
    for _ in range(depth):
        if prev_u is None:
            top_in = _unit(rng.normal(size=dim))
        elif full_rank:
            top_in = prev_u[:, 0].copy()
        else:
            top_in = cosine * prev_u[:, 0] + sine * prev_u[:, -1]
        u = _complete_basis(_unit(rng.normal(size=dim)), rng)
        v = _complete_basis(top_in, rng)
        tail = np.sort(rng.uniform(0.1, 0.6, size=dim - 1))[::-1]
        sing = m_target * overshoot * np.concatenate(([1.0], tail))
        if not full_rank:
            sing[-1] = 0.0
        chain.append((u * sing) @ v.T)
        prev_u = u
    return chain


def check_linear_srank_identity(w) -> BoundCheck:
    """||W||_2 equals ||W||_F / sqrt(srank(W)) up to 1e-8 relative."""
    mat = as_matrix(w)
    if not mat.any():
        raise DegenerateMatrixError("identity undefined for the zero matrix")
    lhs = spectral_norm(mat)
    rhs = frobenius_norm(mat) / math.sqrt(stable_rank(mat))
    return BoundCheck.identity(lhs, rhs, 1e-8, "linear_srank_identity")


def attention_map(h, wq, wk, wv, wo, dk: int) -> np.ndarray:
    """Unmasked single-head attention softmax(h wq wk^T h^T / sqrt(dk)) h wv wo."""
    scores = (h @ wq) @ (h @ wk).T / math.sqrt(dk)
    return row_softmax(scores) @ (h @ wv) @ wo


def _fd_spectral_lhs(f, x0: np.ndarray, fd_step: float):
    """Spectral norm of the fd Jacobian, cross-checked at half the step.

    Returns (lhs, reliable); unreliable instances must be excluded rather
    than counted against the bound.
    """
    lhs = spectral_norm(central_diff_jacobian(f, x0, fd_step))
    lhs_half = spectral_norm(central_diff_jacobian(f, x0, fd_step / 2.0))
    reliable = abs(lhs - lhs_half) <= FD_AGREEMENT_RTOL * max(abs(lhs), abs(lhs_half), 1e-30)
    return lhs, reliable


def _check_fd_step(fd_step: float):
    if not FD_STEP_MIN <= fd_step <= FD_STEP_MAX:
        raise ValueError(f"fd_step must lie in [{FD_STEP_MIN}, {FD_STEP_MAX}], got {fd_step}")


def check_attention_jacobian(h, wq, wk, wv, wo, dk: int, fd_step: float) -> BoundCheck:
    """Full attention Jacobian norm against its two-pathway upper bound.

    rhs = ||A|| ||Wv|| ||Wo|| + (4 chi ||H||^2 / sqrt(dk)) ||Wq|| ||Wk|| ||Wv|| ||Wo||
    with chi = min((n-1) exp(-margin), 1) and the margin taken from the
    scaled scores actually fed to the softmax.
    """
    h = as_matrix(h)
    wq, wk, wv, wo = as_matrix(wq), as_matrix(wk), as_matrix(wv), as_matrix(wo)
    _check_fd_step(fd_step)
    n, d = h.shape
    if n < 2:
        raise ShapeError("attention check needs at least two positions")
    if wq.shape[0] != d or wk.shape != wq.shape or wv.shape[0] != d or wo.shape[0] != wv.shape[1]:
        raise ShapeError("projection shapes are inconsistent with the input")
    if dk < 1:
        raise ValueError(f"dk must be a positive integer, got {dk}")

    def f(vec):
        return attention_map(vec.reshape(n, d), wq, wk, wv, wo, dk).ravel()

    lhs, reliable = _fd_spectral_lhs(f, h.ravel(), fd_step)
    if not reliable:
        return BoundCheck.skip("attention_jacobian: fd step halving disagrees")
    scores = (h @ wq) @ (h @ wk).T / math.sqrt(dk)
    attn = row_softmax(scores)
    chi = min((n - 1) * math.exp(-logit_margin(scores)), 1.0)
    norm_q, norm_k, norm_v, norm_o = map(spectral_norm, (wq, wk, wv, wo))
    norm_h = spectral_norm(h)
    rhs = spectral_norm(attn) * norm_v * norm_o
    rhs += (4.0 * chi * norm_h * norm_h / math.sqrt(dk)) * norm_q * norm_k * norm_v * norm_o
    return BoundCheck.upper(lhs, rhs, f"attention_jacobian n={n} d={d}")


def check_softmax_row_bound(logits_row) -> BoundCheck:
    """||diag(a) - a a^T||_2 <= 2 (1 - max a) for a = softmax(row)."""
    row = np.asarray(logits_row, dtype=np.float64).ravel()
    if row.size < 2:
        raise ShapeError("softmax row bound needs at least two entries")
    a = row_softmax(row)
    lhs = spectral_norm(np.diag(a) - np.outer(a, a))
    rhs = 2.0 * (1.0 - float(a.max()))
    return BoundCheck.upper(lhs, rhs, "softmax_row_bound")


def mlp_map(h_vec, w1, w2, activation: str) -> np.ndarray:
    act, _ = ACTIVATIONS[activation]
    return act(h_vec @ w1) @ w2


def check_mlp_jacobian(w1, w2, h, activation: str, fd_step: float) -> BoundCheck:
    """MLP Jacobian norm against L_phi ||W1||_F ||W2||_F / sqrt(srank products).

    rhs is defined 0 when either weight is the zero matrix.
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    _check_fd_step(fd_step)
    w1, w2 = as_matrix(w1), as_matrix(w2)
    h = np.asarray(h, dtype=np.float64).ravel()
    if h.size != w1.shape[0] or w2.shape[0] != w1.shape[1]:
        raise ShapeError("mlp shapes are inconsistent")

    def f(x):
        return mlp_map(x, w1, w2, activation)

    lhs, reliable = _fd_spectral_lhs(f, h, fd_step)
    if not reliable:
        return BoundCheck.skip("mlp_jacobian: fd step halving disagrees")
    if not w1.any() or not w2.any():
        rhs = 0.0
    else:
        rhs = (
            LIPSCHITZ[activation]
            * frobenius_norm(w1)
            * frobenius_norm(w2)
            / math.sqrt(stable_rank(w1) * stable_rank(w2))
        )
    return BoundCheck.upper(lhs, rhs, f"mlp_jacobian {activation}")


def weight_gradient_floor(
    a: float, gamma: float, m: float, depth: int, layer: int, g_last_norm: float
) -> float:
    """Per-layer lower bound a * gamma * (a m)^(L - i) * ||g_L||."""
    if not 1 <= layer <= depth:
        raise ValueError(f"layer must lie in [1, {depth}], got {layer}")
    return a * gamma * (a * m) ** (depth - layer) * g_last_norm


def total_gradient_floor(
    a: float, gamma: float, m: float, depth: int, n_w: int, g_last_norm: float
) -> float:
    """Depth-summed lower bound C * ((a m)^(2L) - 1) / ((a m)^2 - 1).

    C = a^2 gamma^2 n_w ||g_L||^2; the unit-ratio case a m = 1 returns C * L.
    """
    if depth < 1:
        raise ValueError(f"depth must be at least 1, got {depth}")
    if not 0.0 < a <= 1.0:
        raise ValueError(f"a must lie in (0, 1], got {a}")
    if m <= 0.0:
        raise ValueError(f"m must be positive, got {m}")
    c = a * a * gamma * gamma * n_w * g_last_norm * g_last_norm
    ratio = (a * m) ** 2
    if ratio == 1.0:
        return c * depth
    return c * (ratio**depth - 1.0) / (ratio - 1.0)
