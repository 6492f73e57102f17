"""One-sided local polynomial weights and the sharp/fuzzy effect curves."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .data import QuantileCurve, QuantileGrid
from .errors import EstimationError, ValidationError, WeakFirstStageError
from .kernels import KernelSpec, Side, kernel_eval

MAX_ORDER = 4
WEAK_FIRST_STAGE_FLOOR = 1e-6


@dataclass(frozen=True)
class WeightSet:
    """Closed-form weights of a one-sided weighted least-squares fit.

    ``projector`` maps any response vector to the fitted coefficients in the
    scaled basis ``(1, x/h, ..., (x/h)^p)``; ``weights`` is its first row.
    """

    side: Side
    p: int
    h: float
    kernel: KernelSpec
    xs: np.ndarray
    weights: np.ndarray
    projector: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return self.weights != 0

    def coefficients(self, responses) -> np.ndarray:
        return self.projector @ np.asarray(responses, dtype=float)


class Variant(str, enum.Enum):
    SHARP = "sharp"
    FUZZY = "fuzzy"


@dataclass(frozen=True)
class EffectCurve:
    grid: QuantileGrid
    tau: np.ndarray
    variant: Variant = Variant.SHARP
    projected: bool = False
    denominator: Optional[float] = None

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float).ravel()
        if tau.size != len(self.grid):
            raise ValidationError("effect curve length does not match its grid")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant is Variant.FUZZY and not (self.denominator and abs(self.denominator) > 0):
            raise ValidationError("fuzzy effect needs a nonzero denominator")


def basis(u, p):
    """Rows ``(1, u, ..., u^p)`` for each entry of ``u`` (float dtype preserved)."""
    u = np.asarray(u)
    if not np.issubdtype(u.dtype, np.floating):
        u = u.astype(float)
    return u[..., None] ** np.arange(p + 1)


def _check_order(p):
    if not 0 <= p <= MAX_ORDER:
        raise ValidationError(f"polynomial order must be in [0, {MAX_ORDER}], got {p}")


def lp_weights(xs, h: float, p: int, side, kernel=KernelSpec.TRIANGULAR) -> WeightSet:
    """Intercept weights ``e0'(X'WX)^{-1} X'W`` of the order-``p`` fit on one side."""
    _check_order(p)
    side = Side(side)
    kernel = KernelSpec.parse(kernel)
    if not (np.isfinite(h) and h > 0):
        raise ValidationError(f"bandwidth must be positive and finite, got {h}")
    xs = np.asarray(xs, dtype=float)
    u = xs / h
    k = kernel_eval(kernel, u) * side.mask(xs)
    active = np.flatnonzero(k > 0)
    if np.unique(u[active]).size < p + 1:
        raise EstimationError(
            f"insufficient data in bandwidth window ({side.value} side, h={h:.4g}, "
            f"{active.size} unit(s), order {p})"
        )
    # scale by the nearest power of two (exact in floating point) for conditioning,
    # then map the coefficients to the documented (x/h)^j basis
    scale = 2.0 ** np.round(np.log2(h))
    r = basis(xs[active].astype(np.longdouble) / scale, p)
    proj_active = _solve_weighted(r, k[active], side, h)
    proj_active *= ((h / scale) ** np.arange(p + 1))[:, None]
    projector = np.zeros((p + 1, xs.size))
    projector[:, active] = proj_active
    weights = projector[0].copy()
    for arr in (projector, weights):
        arr.setflags(write=False)
    return WeightSet(side, p, float(h), kernel, xs, weights, projector)


def _solve_weighted(r, k, side, h):
    """``(R'KR)^{-1} R'K`` from a thin QR factorization of ``sqrt(K) R``.

    The factorization (Gram-Schmidt with one reorthogonalization pass) runs
    in extended precision and never forms the normal equations, so the
    weights stay accurate to ~1e-12 even for strongly extrapolating designs.
    """
    ld = np.longdouble
    sw = np.sqrt(np.asarray(k, dtype=ld))
    a = np.asarray(r, dtype=ld) * sw[:, None]
    n, m = a.shape
    q = np.empty((n, m), dtype=ld)
    tri = np.zeros((m, m), dtype=ld)
    for j in range(m):
        v = a[:, j].copy()
        for _ in range(2):
            c = q[:, :j].T @ v
            v -= q[:, :j] @ c
            tri[:j, j] += c
        tri[j, j] = np.sqrt(v @ v)
        if not tri[j, j] > np.sqrt(a[:, j] @ a[:, j]) * 1e-13 ** 0.5:
            raise EstimationError(
                f"insufficient data in bandwidth window ({side.value} side, h={h:.4g}): "
                "collinear design"
            )
        q[:, j] = v / tri[j, j]
    # back substitution for tri @ sol = (sqrt(K) Q)'
    rhs = (q * sw[:, None]).T
    sol = np.empty_like(rhs)
    for i in range(m - 1, -1, -1):
        sol[i] = (rhs[i] - tri[i, i + 1:] @ sol[i + 1:]) / tri[i, i]
    sol = sol.astype(float)
    if not np.all(np.isfinite(sol)):
        raise EstimationError(
            f"insufficient data in bandwidth window ({side.value} side, h={h:.4g}): "
            "collinear design"
        )
    return sol


def _as_matrix(qfs, n=None):
    if isinstance(qfs, np.ndarray):
        mat = qfs
        grid = None
    else:
        qfs = list(qfs)
        if not qfs:
            raise ValidationError("no quantile curves supplied")
        grid = qfs[0].grid
        for c in qfs[1:]:
            if c.grid != grid:
                raise ValidationError("quantile curves are on different grids")
        mat = np.stack([c.values for c in qfs])
    if n is not None and mat.shape[0] != n:
        raise ValidationError(f"{mat.shape[0]} curves for {n} weights")
    return mat, grid


def conditional_mean(ws: WeightSet, qfs: Union[Sequence[QuantileCurve], np.ndarray],
                     grid: Optional[QuantileGrid] = None) -> QuantileCurve:
    """Weighted sum of unit quantile curves; may be non-monotone."""
    mat, g = _as_matrix(qfs, ws.weights.size)
    grid = g or grid
    if grid is None:
        raise ValidationError("grid required when passing a raw quantile matrix")
    return QuantileCurve(grid, ws.weights @ mat, monotone_flag=False)


def treatment_share(ws: WeightSet, ts) -> float:
    if ts is None:
        raise ValidationError("treatment indicator missing")
    ts = np.asarray(ts, dtype=float)
    if ts.shape != ws.weights.shape or np.any(np.isnan(ts)):
        raise ValidationError("treatment indicator missing or misaligned")
    return float(ws.weights @ ts)


def sharp_effect(m_plus: QuantileCurve, m_minus: QuantileCurve, projected: bool = False) -> EffectCurve:
    if m_plus.grid != m_minus.grid:
        raise ValidationError("conditional mean curves are on different grids")
    return EffectCurve(m_plus.grid, m_plus.values - m_minus.values, Variant.SHARP, projected)


def fuzzy_effect(numerator: EffectCurve, share_plus: float, share_minus: float,
                 floor: float = WEAK_FIRST_STAGE_FLOOR) -> EffectCurve:
    """Wald ratio of the outcome jump over the treatment-share jump."""
    jump = share_plus - share_minus
    if not abs(jump) > floor:
        raise WeakFirstStageError(jump, floor)
    return EffectCurve(numerator.grid, numerator.tau / jump, Variant.FUZZY,
                       numerator.projected, denominator=jump)


def poly_fit_eval(ws: WeightSet, responses, x) -> np.ndarray:
    """Fitted one-sided polynomial ``r_p(x/h)' alpha`` at ``x``.

    ``responses`` may be a vector (one per unit) or an ``(n, M)`` matrix, in
    which case one fitted value per column is returned.
    """
    x = np.asarray(x, dtype=float)
    if np.any(~ws.side.mask(np.atleast_1d(x))):
        raise ValidationError(f"evaluation point on the wrong side for the {ws.side.value} fit")
    alpha = ws.coefficients(responses)
    out = basis(x / ws.h, ws.p) @ alpha
    return float(out) if np.ndim(out) == 0 else out
