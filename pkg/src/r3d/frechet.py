"""Projection of estimated curves onto nondecreasing (quantile) functions.

The weighted least-squares projection onto the monotone cone is solved
exactly by pool-adjacent-violators. Applied to a local polynomial
conditional-mean curve it yields the Fréchet (Wasserstein barycenter)
estimate on the grid.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .data import QuantileCurve
from .errors import ValidationError


def pava(values, weights=None) -> np.ndarray:
    """Minimize ``sum w_j (v_j - u_j)^2`` over nondecreasing ``u``."""
    v = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(v)):
        raise ValidationError("cannot project non-finite values")
    m = v.size
    if m == 0:
        return v.copy()
    if np.all(v[1:] >= v[:-1]):
        return v.copy()
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.size != m or np.any(w <= 0):
        raise ValidationError("grid weights must be positive, one per grid point")

    # blocks as parallel stacks: weighted sum, total weight, length
    sums = []
    wts = []
    lens = []
    for j in range(m):
        s, wt, ln = v[j] * w[j], w[j], 1
        while sums and sums[-1] * wt >= s * wts[-1]:
            # previous block mean >= current block mean: pool
            s += sums.pop()
            wt += wts.pop()
            ln += lens.pop()
        sums.append(s)
        wts.append(wt)
        lens.append(ln)
    means = np.array(sums) / np.array(wts)
    return np.repeat(means, lens)


def project_qf(curve: QuantileCurve, grid_weights: Optional[np.ndarray] = None) -> QuantileCurve:
    """L2 projection of ``curve`` onto nondecreasing functions on its grid."""
    return QuantileCurve(curve.grid, pava(curve.values, grid_weights), monotone_flag=True)


def project_rows(mat: np.ndarray, grid_weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Apply :func:`pava` to every row; rows that are already monotone are copied."""
    mat = np.asarray(mat, dtype=float)
    out = mat.copy()
    bad = np.flatnonzero(np.any(np.diff(mat, axis=1) < 0, axis=1))
    for i in bad:
        out[i] = pava(mat[i], grid_weights)
    return out


def rearrange(curve: QuantileCurve) -> QuantileCurve:
    """Monotone rearrangement: sort the values."""
    if not np.all(np.isfinite(curve.values)):
        raise ValidationError("cannot rearrange non-finite values")
    return QuantileCurve(curve.grid, np.sort(curve.values), monotone_flag=True)
