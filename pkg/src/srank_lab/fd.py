"""Central finite-difference Jacobians for small vector-valued maps."""

import numpy as np


def central_diff_jacobian(f, x0, step: float) -> np.ndarray:
    """J[i, j] = d f_i / d x_j by central differences around x0 (both 1-D)."""
    x0 = np.asarray(x0, dtype=np.float64)
    y0 = np.asarray(f(x0), dtype=np.float64)
    jac = np.empty((y0.size, x0.size))
    for j in range(x0.size):
        xp = x0.copy()
        xp[j] += step
        xm = x0.copy()
        xm[j] -= step
        jac[:, j] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * step)
    return jac


def default_step(x) -> float:
    """Step scaled to the input magnitude; adequate at the sizes used here."""
    return 1e-5 * (1.0 + float(np.max(np.abs(x))))
