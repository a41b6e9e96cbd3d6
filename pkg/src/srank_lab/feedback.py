"""Stylized singular-value dynamics for a linear layer whose input/output
covariances stay aligned with its singular bases.

In that regime a gradient step moves each singular value by -eta * c_i with
c_i the (negative) covariance of the i-th projected input/output pair, so
the whole mechanism reduces to a diagonal update rule. The simulator tracks
that rule, the ratio condition that forces stable rank downward, and the
effect of periodically equalizing the spectrum at fixed Euclidean norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RegimeExitError


@dataclass
class FeedbackSpec:
    """Initial spectrum s0 (descending, positive), per-direction covariances
    (all negative), step size eta, and the number of steps to simulate."""

    s0: np.ndarray
    cov: np.ndarray
    eta: float
    steps: int

    def __post_init__(self):
        self.s0 = np.asarray(self.s0, dtype=np.float64).ravel()
        self.cov = np.asarray(self.cov, dtype=np.float64).ravel()
        if self.s0.size < 1:
            raise ValueError("s0 must be non-empty")
        if self.cov.shape != self.s0.shape:
            raise ValueError("cov must match s0 in length")
        if not (self.s0 > 0.0).all():
            raise ValueError("s0 entries must be positive")
        if (np.diff(self.s0) > 0.0).any():
            raise ValueError("s0 must be non-increasing")
        if not (self.cov < 0.0).all():
            raise ValueError("cov entries must be negative")
        if self.eta <= 0.0:
            raise ValueError("eta must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


@dataclass
class TrajectoryPoint:
    step: int
    s: np.ndarray
    srank: float
    restored: bool = False


def _srank_of(s: np.ndarray) -> float:
    top = float(s[0])
    return float((s * s).sum()) / (top * top)


def check_ratio_condition(spec: FeedbackSpec) -> bool:
    """True iff c_1 / c_i > s_1 / s_i strictly for every i > 1."""
    s, c = spec.s0, spec.cov
    if s.size == 1:
        return True
    return bool((c[0] / c[1:] > s[0] / s[1:]).all())


def _ratio_condition(s: np.ndarray, c: np.ndarray) -> bool:
    if s.size == 1:
        return True
    return bool((c[0] / c[1:] > s[0] / s[1:]).all())


def _advance(s: np.ndarray, cov: np.ndarray, eta: float, step: int, trajectory):
    s_new = s - eta * cov
    if (s_new <= 0.0).any() or (np.diff(s_new) > 0.0).any():
        raise RegimeExitError(step, trajectory)
    return s_new


def simulate_feedback(spec: FeedbackSpec, refresh_cov: bool = False):
    """Iterate s_i <- s_i - eta * c_i; returns trajectory points 0..steps.

    With refresh_cov each step rescales c_i proportionally to the growth of
    its singular value (c_i <- c_i^0 * s_i / s_i^0), which preserves the
    ratio condition exactly when the initial spec satisfied it; the rescaled
    condition is re-verified each step and a failure exits the regime.
    Raises RegimeExitError as soon as the spectrum stops being positive and
    non-increasing.
    """
    s = spec.s0.copy()
    trajectory = [TrajectoryPoint(0, s.copy(), _srank_of(s))]
    for step in range(1, spec.steps + 1):
        if refresh_cov:
            cov = spec.cov * (s / spec.s0)
            if not _ratio_condition(s, cov):
                raise RegimeExitError(step, trajectory)
        else:
            cov = spec.cov
        s = _advance(s, cov, spec.eta, step, trajectory)
        trajectory.append(TrajectoryPoint(step, s.copy(), _srank_of(s)))
    return trajectory


def simulate_feedback_with_msign(spec: FeedbackSpec, period: int):
    """Like simulate_feedback (fixed covariances) but every `period` steps
    the spectrum is replaced by the equalized one at the same Euclidean norm,
    i.e. all values become ||s||_2 / sqrt(n)."""
    if period < 1:
        raise ValueError(f"period must be at least 1, got {period}")
    s = spec.s0.copy()
    trajectory = [TrajectoryPoint(0, s.copy(), _srank_of(s))]
    for step in range(1, spec.steps + 1):
        s = _advance(s, spec.cov, spec.eta, step, trajectory)
        restored = step % period == 0
        if restored:
            s = np.full_like(s, float(np.sqrt((s * s).sum())) / math.sqrt(s.size))
        trajectory.append(TrajectoryPoint(step, s.copy(), _srank_of(s), restored))
    return trajectory


def write_trajectory_csv(trajectory, path) -> None:
    """CSV with columns step, s_1..s_n, srank, restored (0/1)."""
    n = trajectory[0].s.size
    header = ",".join(["step"] + [f"s_{i + 1}" for i in range(n)] + ["srank", "restored"])
    lines = [header]
    for point in trajectory:
        cells = [str(point.step)]
        cells += [format(x, ".17g") for x in point.s]
        cells += [format(point.srank, ".17g"), str(int(point.restored))]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
