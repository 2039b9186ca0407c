"""Restricted (natural) cubic spline basis in Harrell's truncated-power form."""

from __future__ import annotations

import numpy as np

DEFAULT_QUANTILES = (0.10, 0.50, 0.90)


def rcs_knots(x, quantiles=DEFAULT_QUANTILES) -> np.ndarray:
    """Place knots at empirical quantiles of the finite values of `x`."""
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if np.unique(x).size < len(quantiles):
        raise ValueError(
            f"need at least {len(quantiles)} distinct values to place spline knots, "
            f"got {np.unique(x).size}"
        )
    knots = np.quantile(x, quantiles)
    if np.any(np.diff(knots) <= 0):
        raise ValueError(f"spline knots are not strictly increasing: {knots}")
    return knots


def rcs_basis(x, knots) -> np.ndarray:
    """Evaluate the restricted cubic spline basis.

    Returns an ``(n, k - 1)`` array for ``k`` knots: the first column is `x`
    itself, the remaining ``k - 2`` columns are the nonlinear terms. Each
    nonlinear term is zero left of the first knot and linear beyond the last
    knot. Terms are divided by ``(t_k - t_1)**2`` so they share the scale of
    `x`.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(knots, dtype=float)
    k = t.size
    if k < 3:
        raise ValueError("restricted cubic splines need at least 3 knots")
    if np.any(np.diff(t) <= 0):
        raise ValueError("knots must be strictly increasing")
    norm = (t[-1] - t[0]) ** 2
    out = np.empty((x.size, k - 1))
    out[:, 0] = x

    def cube(u):
        return np.where(u > 0, u, 0.0) ** 3

    tail = cube(x - t[-1])
    tail2 = cube(x - t[-2])
    for j in range(k - 2):
        term = (
            cube(x - t[j])
            - tail2 * (t[-1] - t[j]) / (t[-1] - t[-2])
            + tail * (t[-2] - t[j]) / (t[-1] - t[-2])
        )
        out[:, j + 1] = term / norm
    return out
