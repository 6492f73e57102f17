"""Plug-in bandwidth selection.

Pipeline: rule-of-thumb density at the cutoff, pilot bandwidths from
bias/variance guesses, first-stage local polynomial fits giving derivative
and conditional-variance estimates, then MSE-optimal per-quantile and
IMSE-optimal scalar bandwidths, optionally shrunk by the rule-of-thumb
coverage-error factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import QuantileGrid
from .errors import EstimationError, ValidationError
from .kernels import KernelSpec, Side, kernel_eval, kernel_moments
from .localpoly import basis, lp_weights

SIDES = (Side.PLUS, Side.MINUS)


@dataclass(frozen=True)
class FirstStageFit:
    """Per-side derivative and variance estimates from the pilot fits.

    Dict keys are :class:`Side`. Arrays are over the quantile grid; the
    treatment entries are scalars (``None`` in sharp designs).
    """

    s: int
    deriv: dict
    sigma2: dict
    coef: dict
    deriv_t: Optional[dict] = None
    sigma2_t: Optional[dict] = None
    deriv_var: Optional[dict] = None
    deriv_var_t: Optional[dict] = None


@dataclass(frozen=True)
class BandwidthPlan:
    h1: np.ndarray
    h2: float
    h_frechet: float
    pilots: dict
    density_at_cutoff: float
    rot_applied: bool = False
    diagnostics: tuple = ()

    def __post_init__(self):
        h1 = np.asarray(self.h1, dtype=float).ravel()
        object.__setattr__(self, "h1", h1)
        vals = np.concatenate([h1, [self.h2, self.h_frechet]])
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise EstimationError(f"non-positive or non-finite bandwidth in plan: {vals}")

    @classmethod
    def manual(cls, h: float, m: int, f0: float) -> "BandwidthPlan":
        return cls(np.full(m, float(h)), float(h), float(h), {}, f0, False,
                   ("manual bandwidth",))

    def baseline(self, method: str) -> float:
        """Baseline ``h`` whose ratio to ``h1(q)`` defines ``c1(q)``."""
        if method == "frechet":
            return self.h_frechet
        return float(np.exp(np.mean(np.log(self.h1))))

    def as_dict(self) -> dict:
        return {
            "h1": self.h1.tolist(),
            "h2": self.h2,
            "h_frechet": self.h_frechet,
            "pilots": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                       for k, v in self.pilots.items()},
            "density_at_cutoff": self.density_at_cutoff,
            "rot_applied": self.rot_applied,
        }


# --------------------------------------------------------------- formulas

def optimal_bandwidth(variance, bias, s: int, n: int):
    """``((1/(2(s+1))) V / B^2)^(1/(2s+3)) n^(-1/(2s+3))``."""
    rate = 1.0 / (2 * s + 3)
    return (variance / (2.0 * (s + 1) * np.square(bias))) ** rate * float(n) ** (-rate)


def rot_adjust(h, s: int, n: int):
    """Coverage-error rule of thumb: ``h * n^(-s/((2s+3)(s+3)))``."""
    if np.any(np.asarray(h) <= 0):
        raise ValidationError("bandwidth must be positive")
    return h * float(n) ** (-s / ((2 * s + 3) * (s + 3)))


def silverman_scale(xs) -> float:
    xs = np.asarray(xs, dtype=float)
    return 1.06 * float(np.std(xs, ddof=1)) * xs.size ** (-0.2)


def density_at_cutoff(xs, kernel=KernelSpec.TRIANGULAR) -> float:
    """Kernel density of the running variable at 0 with Silverman's scale."""
    xs = np.asarray(xs, dtype=float)
    if xs.size < 2:
        raise ValidationError("density estimate needs at least 2 observations")
    if not np.std(xs) > 0:
        raise ValidationError("running variable has zero sample variance")
    c = silverman_scale(xs)
    return float(np.sum(kernel_eval(kernel, xs / c)) / (xs.size * c))


def bias_factor(kernel, s: int, side) -> float:
    """``e0' Gamma^{-1} Lambda / (s+1)!`` for the order-``s`` fit on ``side``."""
    return kernel_moments(kernel, s, side).bias_constant / math.factorial(s + 1)


def variance_factor(kernel, s: int, side) -> float:
    return kernel_moments(kernel, s, side).variance_constant


def bias_constants(deriv: dict, kernel, s: int) -> dict:
    return {sd: bias_factor(kernel, s, sd) * np.asarray(deriv[sd]) for sd in SIDES}


def variance_constants(sigma2: dict, kernel, s: int, f0: float) -> dict:
    return {sd: variance_factor(kernel, s, sd) * np.asarray(sigma2[sd]) / f0 for sd in SIDES}


# ----------------------------------------------------------------- pilots

def pilot_bandwidths(xs, s: int, kernel=KernelSpec.TRIANGULAR, f0: Optional[float] = None,
                     deriv_guess=(1.0, 1.0), var_guess=(1.0, 1.0)):
    """Pilot bandwidth from guessed derivatives and variances (plus, minus).

    Returns ``(h0, diagnostics)``. When the guessed bias constant vanishes the
    rule of thumb ``sd(X) n^(-1/(2s+3))`` is used instead.
    """
    xs = np.asarray(xs, dtype=float)
    n = xs.size
    if f0 is None:
        f0 = density_at_cutoff(xs, kernel)
    dp, dm = (np.asarray(g, dtype=float) for g in deriv_guess)
    vp, vm = (np.asarray(g, dtype=float) for g in var_guess)
    if np.any(vp < 0) or np.any(vm < 0):
        raise ValidationError("variance guesses must be nonnegative")
    c_bias = bias_factor(kernel, s, Side.PLUS) * dp - bias_factor(kernel, s, Side.MINUS) * dm
    c_var = (variance_factor(kernel, s, Side.PLUS) * vp
             + variance_factor(kernel, s, Side.MINUS) * vm) / f0
    return _formula_or_fallback(c_var, c_bias, s, n, fallback=_rot_pilot(xs, s), what="pilot")


def _rot_pilot(xs, s):
    return float(np.std(xs, ddof=1)) * xs.size ** (-1.0 / (2 * s + 3))


def _formula_or_fallback(var, bias, s, n, fallback, what):
    var = np.asarray(var, dtype=float)
    bias = np.asarray(bias, dtype=float)
    var, bias = np.broadcast_arrays(var, bias)
    out = np.empty(var.shape)
    degenerate = (np.abs(bias) < 1e-12) | ~(var > 0)
    fb = np.broadcast_to(np.asarray(fallback, dtype=float), var.shape)
    out[degenerate] = fb[degenerate]
    ok = ~degenerate
    out[ok] = optimal_bandwidth(var[ok], bias[ok], s, n)
    diags = []
    if degenerate.any():
        diags.append(f"{what}: zero bias or variance constant at {int(degenerate.sum())} "
                     f"point(s); using fallback bandwidth")
    if out.ndim == 0:
        out = float(out)
    return out, diags


# ------------------------------------------------------------ first stage

def _side_fit(xs, h, order, side, kernel, max_widen=8):
    """Local polynomial fit; widens ``h`` by 1.5x until the window supports ``order``."""
    for k in range(max_widen + 1):
        try:
            return lp_weights(xs, h * 1.5 ** k, order, side, kernel), k
        except EstimationError:
            if k == max_widen:
                raise
    raise AssertionError("unreachable")


def first_stage(xs, qmat, grid: QuantileGrid, h0_1, s: int, kernel=KernelSpec.TRIANGULAR,
                ts=None, h0_2: Optional[float] = None):
    """Pilot local polynomial fits at each grid point.

    The ``(s+1)``-th derivative is read off an order ``s+1`` fit (an order ``s``
    fit has no such coefficient); variances are kernel-weighted mean squared
    residuals of the order ``s`` fit evaluated at each unit's own ``x``.
    Returns ``(fit, diagnostics)``.
    """
    xs = np.asarray(xs, dtype=float)
    qmat = np.asarray(qmat, dtype=float)
    m = len(grid)
    h0 = np.broadcast_to(np.asarray(h0_1, dtype=float), (m,))
    diags = []
    deriv = {sd: np.empty(m) for sd in SIDES}
    deriv_var = {sd: np.empty(m) for sd in SIDES}
    sigma2 = {sd: np.empty(m) for sd in SIDES}
    coef = {sd: np.empty((m, s + 1)) for sd in SIDES}
    fact = math.factorial(s + 1)

    # bandwidths are often q-independent: group columns sharing a pilot
    for hv in np.unique(h0):
        cols = np.flatnonzero(h0 == hv)
        y = qmat[:, cols]
        for sd in SIDES:
            d, dvar, dv, cf = _side_moments(xs, y, hv, s, sd, kernel, fact, diags)
            deriv[sd][cols] = d
            deriv_var[sd][cols] = dvar
            sigma2[sd][cols] = dv
            coef[sd][cols] = cf.T

    deriv_t = sigma2_t = deriv_var_t = None
    if ts is not None:
        hv = float(h0_2 if h0_2 is not None else np.median(h0))
        ts = np.asarray(ts, dtype=float)[:, None]
        deriv_t, sigma2_t, deriv_var_t = {}, {}, {}
        for sd in SIDES:
            d, dvar, dv, _ = _side_moments(xs, ts, hv, s, sd, kernel, fact, diags)
            deriv_t[sd] = float(d[0])
            deriv_var_t[sd] = float(dvar[0])
            sigma2_t[sd] = float(dv[0])
    return FirstStageFit(s, deriv, sigma2, coef, deriv_t, sigma2_t, deriv_var,
                         deriv_var_t), diags


def _side_moments(xs, y, h, s, side, kernel, fact, diags):
    ws_hi, k_hi = _side_fit(xs, h, s + 1, side, kernel)
    ws_lo, k_lo = _side_fit(xs, h, s, side, kernel)
    if k_hi or k_lo:
        diags.append(f"first stage: pilot window widened on {side.value} side "
                     f"(h={h:.4g} -> {max(ws_hi.h, ws_lo.h):.4g})")
    alpha_hi = ws_hi.projector @ y
    dscale = fact / ws_hi.h ** (s + 1)
    deriv = dscale * alpha_hi[s + 1]
    # sampling variance of the derivative estimate (residuals of the same fit)
    act_hi = ws_hi.projector[s + 1] != 0
    r_hi = y[act_hi] - basis(xs[act_hi] / ws_hi.h, s + 1) @ alpha_hi
    deriv_var = dscale ** 2 * (ws_hi.projector[s + 1, act_hi] ** 2 @ r_hi ** 2)

    alpha_lo = ws_lo.projector @ y
    u = xs / ws_lo.h
    kw = kernel_eval(kernel, u) * side.mask(xs)
    act = kw > 0
    fitted = basis(u[act], s) @ alpha_lo
    resid = y[act] - fitted
    sig2 = (kw[act] @ resid ** 2) / kw[act].sum()
    # coefficients in the unscaled basis (derivatives divided by factorials)
    scale = ws_lo.h ** -np.arange(s + 1)
    return deriv, deriv_var, sig2, alpha_lo * scale[:, None]


def global_guesses(xs, y, s: int):
    """Derivative and residual-variance guesses from per-side global polynomials of degree ``s+1``."""
    xs = np.asarray(xs, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    deriv, var = [], []
    for sd in SIDES:
        m = sd.mask(xs)
        if m.sum() < s + 3:
            raise EstimationError(f"too few units on the {sd.value} side for global pilot fit")
        r = basis(xs[m], s + 1)
        coef, *_ = np.linalg.lstsq(r, y[m], rcond=None)
        resid = y[m] - r @ coef
        deriv.append(math.factorial(s + 1) * coef[s + 1])
        var.append(np.mean(resid ** 2, axis=0))
    return (deriv[0], deriv[1]), (var[0], var[1])


# --------------------------------------------------------- final bandwidths

def _squared_bias(fit: FirstStageFit, kernel, regularize: bool, treatment: bool = False):
    """``(B+ - B-)^2``, plus the sampling variance of that difference when regularizing."""
    s = fit.s
    deriv = fit.deriv_t if treatment else fit.deriv
    bf = {sd: bias_factor(kernel, s, sd) for sd in SIDES}
    b2 = np.square(bf[Side.PLUS] * np.asarray(deriv[Side.PLUS])
                   - bf[Side.MINUS] * np.asarray(deriv[Side.MINUS]))
    if regularize:
        dvar = fit.deriv_var_t if treatment else fit.deriv_var
        if dvar is None:
            raise ValidationError("regularization needs derivative variances from the first stage")
        b2 = b2 + sum(bf[sd] ** 2 * np.asarray(dvar[sd]) for sd in SIDES)
    return b2


def mse_bandwidth(fit: FirstStageFit, n: int, kernel, f0: float, fallback=None,
                  regularize: bool = False):
    """Per-quantile MSE-optimal bandwidths for the order-``s`` estimator.

    The variance constant is the sum of the two one-sided constants. With
    ``regularize`` the squared bias constant is inflated by its estimated
    sampling variance, which keeps the bandwidth finite and stable when the
    true bias is close to zero.
    """
    s = fit.s
    v = variance_constants(fit.sigma2, kernel, s, f0)
    bias = np.sqrt(_squared_bias(fit, kernel, regularize))
    return _formula_or_fallback(v[Side.PLUS] + v[Side.MINUS], bias,
                                s, n, fallback=fallback, what="mse bandwidth")


def imse_bandwidth(fit: FirstStageFit, grid: QuantileGrid, n: int, kernel, f0: float,
                   fallback=None, regularize: bool = False):
    """Scalar bandwidth minimizing the grid-integrated MSE (trapezoid rule)."""
    s = fit.s
    v = variance_constants(fit.sigma2, kernel, s, f0)
    q = grid.points
    a_s = float(np.trapezoid(_squared_bias(fit, kernel, regularize), q))
    b_s = float(np.trapezoid(v[Side.PLUS] + v[Side.MINUS], q))
    return imse_from_integrals(a_s, b_s, s, n, fallback)


def imse_from_integrals(a_s, b_s, s, n, fallback=None):
    if not a_s > 0 or not b_s > 0:
        if fallback is None:
            raise EstimationError("IMSE constants degenerate and no fallback bandwidth given")
        return float(fallback), ["imse bandwidth: zero integrated bias; using pilot bandwidth"]
    rate = 1.0 / (2 * s + 3)
    return float((b_s / (2.0 * (s + 1) * a_s)) ** rate * float(n) ** (-rate)), []


def treatment_bandwidth(fit: FirstStageFit, n: int, kernel, f0: float, fallback,
                        regularize: bool = False):
    s = fit.s
    v = {sd: variance_factor(kernel, s, sd) * fit.sigma2_t[sd] / f0 for sd in SIDES}
    bias = float(np.sqrt(_squared_bias(fit, kernel, regularize, treatment=True)))
    h, d = _formula_or_fallback(v[Side.PLUS] + v[Side.MINUS], bias,
                                s, n, fallback=fallback, what="treatment bandwidth")
    return float(h), d


def select_bandwidths(xs, qmat, grid: QuantileGrid, s: int = 1, kernel=KernelSpec.TRIANGULAR,
                      ts=None, coverage_correction: bool = True,
                      pilot_guess: str = "global", regularize: bool = True) -> BandwidthPlan:
    """Full data-driven plan: ``h1(q)``, ``h2`` and the Fréchet ``h``.

    ``pilot_guess`` is ``"ones"`` (unit derivative and variance guesses) or
    ``"global"`` (per-side global polynomial fits). ``regularize`` adds the
    estimated variance of the bias constant to its square (see
    :func:`mse_bandwidth`).
    """
    xs = np.asarray(xs, dtype=float)
    n = xs.size
    kernel = KernelSpec.parse(kernel)
    diags = []
    f0 = density_at_cutoff(xs, kernel)
    if not f0 > 0:
        raise EstimationError("estimated density of the running variable at the cutoff is zero")

    if pilot_guess == "ones":
        dg, vg = (1.0, 1.0), (1.0, 1.0)
        dg_t, vg_t = dg, vg
    elif pilot_guess == "global":
        dg, vg = global_guesses(xs, qmat, s)
        if ts is not None:
            dg_t, vg_t = global_guesses(xs, ts, s)
    else:
        raise ValidationError(f"unknown pilot guess rule {pilot_guess!r}")

    h0_1, d = pilot_bandwidths(xs, s, kernel, f0, dg, vg)
    diags += d
    h0_2 = None
    if ts is not None:
        h0_2, d = pilot_bandwidths(xs, s, kernel, f0, dg_t, vg_t)
        h0_2 = float(np.mean(h0_2))
        diags += d

    fit, d = first_stage(xs, qmat, grid, h0_1, s, kernel, ts=ts, h0_2=h0_2)
    diags += d
    h1, d = mse_bandwidth(fit, n, kernel, f0, fallback=h0_1, regularize=regularize)
    diags += d
    h1 = np.broadcast_to(np.asarray(h1, dtype=float), (len(grid),)).copy()
    h_fr, d = imse_bandwidth(fit, grid, n, kernel, f0, fallback=float(np.mean(h0_1)),
                             regularize=regularize)
    diags += d
    if ts is not None:
        h2, d = treatment_bandwidth(fit, n, kernel, f0, fallback=h0_2, regularize=regularize)
        diags += d
    else:
        h2 = float(np.mean(h0_1))

    if coverage_correction:
        h1 = rot_adjust(h1, s, n)
        h2 = float(rot_adjust(h2, s, n))
        h_fr = float(rot_adjust(h_fr, s, n))
    pilots = {"h0_1": h0_1, "h0_2": h0_2}
    return BandwidthPlan(h1, h2, h_fr, pilots, f0, coverage_correction, tuple(diags))
