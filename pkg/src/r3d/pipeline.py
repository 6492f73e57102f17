"""End-to-end estimation: bandwidths, effect curve, bootstrap inference."""

from __future__ import annotations

import logging
from typing import Optional, Tuple

import numpy as np

from .bandwidth import BandwidthPlan, density_at_cutoff, select_bandwidths
from .data import QuantileCurve, QuantileGrid, UnitSample
from .errors import ValidationError
from .frechet import pava
from .inference import InferenceReport, bootstrap_bands, process_loadings, residuals
from .kernels import KernelSpec, Side
from .localpoly import (fuzzy_effect, lp_weights, sharp_effect,
                        treatment_share)

log = logging.getLogger(__name__)

METHODS = ("frechet", "localpoly")


def _side_means(xs, qmat, h1, p, kernel):
    """Local polynomial conditional means per side, one bandwidth per grid column."""
    m = qmat.shape[1]
    out = {sd: np.empty(m) for sd in (Side.PLUS, Side.MINUS)}
    for hv in np.unique(h1):
        cols = np.flatnonzero(h1 == hv)
        for sd in out:
            ws = lp_weights(xs, hv, p, sd, kernel)
            out[sd][cols] = ws.weights @ qmat[:, cols]
    return out[Side.PLUS], out[Side.MINUS]


def fit_arrays(xs, qmat, grid: QuantileGrid, ts=None, method: str = "frechet", p: int = 2,
               s: Optional[int] = None, kernel="triangular", bandwidth: Optional[float] = None,
               plan: Optional[BandwidthPlan] = None, coverage_correction: bool = True,
               rearrange: bool = False, B: int = 5000, level: float = 0.10, seed: int = 0,
               test_range: Optional[Tuple[float, float]] = None, t_order: Optional[int] = None,
               pilot_guess: str = "global", regularize: bool = True, add_one: bool = True,
               weak_floor: float = 1e-6) -> InferenceReport:
    """Estimate the effect curve and (when ``B > 0``) its uniform band and tests.

    ``xs`` are cutoff-centered running values, ``qmat`` the ``(n, M)`` unit
    quantile matrix. ``ts`` switches on the fuzzy design.
    """
    if method not in METHODS:
        raise ValidationError(f"method must be one of {METHODS}, got {method!r}")
    kernel = KernelSpec.parse(kernel)
    xs = np.asarray(xs, dtype=float)
    qmat = np.asarray(qmat, dtype=float)
    if qmat.shape != (xs.size, len(grid)):
        raise ValidationError(f"quantile matrix shape {qmat.shape} != ({xs.size}, {len(grid)})")
    s = p - 1 if s is None else s
    if s < 0 or s > p:
        raise ValidationError(f"pilot order must be in [0, p], got {s}")
    t_order = p if t_order is None else t_order
    if not 0 <= t_order <= p:
        raise ValidationError(f"first-stage order must be in [0, p], got {t_order}")
    n = xs.size
    fuzzy = ts is not None

    if plan is None:
        if bandwidth is not None:
            plan = BandwidthPlan.manual(bandwidth, len(grid), density_at_cutoff(xs, kernel))
        else:
            plan = select_bandwidths(xs, qmat, grid, s, kernel, ts=ts,
                                     coverage_correction=coverage_correction,
                                     pilot_guess=pilot_guess, regularize=regularize)
    diags = list(plan.diagnostics)

    if method == "frechet":
        h1 = np.full(len(grid), plan.h_frechet)
    else:
        h1 = plan.h1
    m_plus, m_minus = _side_means(xs, qmat, h1, p, kernel)
    projected = False
    if method == "frechet":
        m_plus, m_minus = pava(m_plus), pava(m_minus)
        projected = True
    elif rearrange:
        m_plus, m_minus = np.sort(m_plus), np.sort(m_minus)
    effect = sharp_effect(QuantileCurve(grid, m_plus), QuantileCurve(grid, m_minus), projected)
    tau_num = effect.tau

    jump = None
    if fuzzy:
        ts = np.asarray(ts, dtype=float)
        share_p = treatment_share(lp_weights(xs, plan.h2, p, Side.PLUS, kernel), ts)
        share_m = treatment_share(lp_weights(xs, plan.h2, p, Side.MINUS, kernel), ts)
        effect = fuzzy_effect(effect, share_p, share_m, weak_floor)
        jump = effect.denominator

    h_base = plan.baseline(method)
    scale = float(np.sqrt(n * h_base))
    extra = dict(m_plus=m_plus, m_minus=m_minus, bandwidths=plan, method=method,
                 diagnostics=tuple(diags))
    if B == 0:
        return InferenceReport(effect, None, None, None, None, None, 0, level, seed,
                               test_range=test_range, scale=scale, **extra)

    res = residuals(xs, qmat, h1, t_order, kernel, ts=ts if fuzzy else None,
                    h2=plan.h2 if fuzzy else None, project=(method == "frechet"))
    loads = process_loadings(res, p, kernel, plan.density_at_cutoff, h_base,
                             tau_num=tau_num, jump=jump)
    return bootstrap_bands(effect, loads, scale, B, level, seed, q_range=test_range,
                           add_one=add_one, **extra)


def estimate(sample: UnitSample, grid: Optional[QuantileGrid] = None, fuzzy: bool = False,
             **kwargs) -> InferenceReport:
    """Run :func:`fit_arrays` on a loaded :class:`UnitSample`."""
    grid = grid or QuantileGrid.uniform()
    ts = sample.ts if fuzzy else None
    qmat = sample.quantile_matrix(grid)
    report = fit_arrays(sample.xs, qmat, grid, ts=ts, **kwargs)
    if sample.diagnostics:
        object.__setattr__(report, "diagnostics", report.diagnostics + sample.diagnostics)
    return report
