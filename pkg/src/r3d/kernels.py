"""Kernels on [-1, 1] and their one-sided moment matrices."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import integrate

from .errors import ValidationError


class KernelSpec(str, enum.Enum):
    TRIANGULAR = "triangular"
    UNIFORM = "uniform"
    EPANECHNIKOV = "epanechnikov"

    @classmethod
    def parse(cls, value) -> "KernelSpec":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(f"unknown kernel {value!r}") from None

    def __call__(self, u):
        return kernel_eval(self, u)


class Side(str, enum.Enum):
    PLUS = "plus"
    MINUS = "minus"

    @property
    def sign(self) -> int:
        return 1 if self is Side.PLUS else -1

    def mask(self, xs: np.ndarray) -> np.ndarray:
        # units at the cutoff are treated
        return xs >= 0 if self is Side.PLUS else xs < 0


def kernel_eval(spec, u):
    """Kernel density at ``u``; zero outside ``[-1, 1]``. Accepts scalars or arrays."""
    spec = KernelSpec.parse(spec)
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) <= 1.0
    if spec is KernelSpec.TRIANGULAR:
        k = 1.0 - np.abs(u)
    elif spec is KernelSpec.UNIFORM:
        k = np.full_like(u, 0.5)
    else:
        k = 0.75 * (1.0 - u * u)
    out = np.where(inside, k, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class KernelMoments:
    """One-sided moment matrices of order ``p``.

    ``gamma[j, k]`` integrates ``u^(j+k) K(u)``, ``lam[j]`` integrates
    ``u^(p+1+j) K(u)`` and ``psi[j, k]`` integrates ``u^(j+k) K(u)^2``, all
    over ``[0, 1]`` (plus side) or ``[-1, 0]`` (minus side).
    """

    spec: KernelSpec
    p: int
    side: Side
    gamma: np.ndarray
    lam: np.ndarray
    psi: np.ndarray

    @property
    def gamma_inv_e0(self) -> np.ndarray:
        """First row of ``gamma^{-1}`` (``gamma`` is symmetric)."""
        e0 = np.zeros(self.p + 1)
        e0[0] = 1.0
        return np.linalg.solve(self.gamma, e0)

    @property
    def bias_constant(self) -> float:
        """``e0' gamma^{-1} lam``."""
        return float(self.gamma_inv_e0 @ self.lam)

    @property
    def variance_constant(self) -> float:
        """``e0' gamma^{-1} psi gamma^{-1} e0``."""
        g = self.gamma_inv_e0
        return float(g @ self.psi @ g)


# Closed-form plus-side moments ∫_0^1 u^k K(u) du and ∫_0^1 u^k K(u)^2 du.
def _closed_moment(spec, k, squared):
    if spec is KernelSpec.UNIFORM:
        c = Fraction(1, 4) if squared else Fraction(1, 2)
        return c * Fraction(1, k + 1)
    if spec is KernelSpec.TRIANGULAR:
        if squared:
            # (1-u)^2 = 1 - 2u + u^2
            return Fraction(1, k + 1) - Fraction(2, k + 2) + Fraction(1, k + 3)
        return Fraction(1, k + 1) - Fraction(1, k + 2)
    return None


_CLOSED_FORM_MAX_P = 4


def _plus_moment(spec, k, squared):
    if spec is not KernelSpec.EPANECHNIKOV and k <= 3 * _CLOSED_FORM_MAX_P + 1:
        return float(_closed_moment(spec, k, squared))
    if squared:
        f = lambda u: u ** k * kernel_eval(spec, u) ** 2  # noqa: E731
    else:
        f = lambda u: u ** k * kernel_eval(spec, u)  # noqa: E731
    val, _ = integrate.quad(f, 0.0, 1.0, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val


@lru_cache(maxsize=None)
def kernel_moments(spec, p: int, side) -> KernelMoments:
    spec = KernelSpec.parse(spec)
    side = Side(side)
    if p < 0:
        raise ValidationError(f"polynomial order must be nonnegative, got {p}")
    sgn = side.sign
    # symmetric kernels: ∫_{-1}^0 u^k K = (-1)^k ∫_0^1 u^k K
    mom = [_plus_moment(spec, k, False) * sgn ** k for k in range(2 * p + 3)]
    mom2 = [_plus_moment(spec, k, True) * sgn ** k for k in range(2 * p + 1)]
    idx = np.add.outer(np.arange(p + 1), np.arange(p + 1))
    gamma = np.asarray(mom)[idx]
    psi = np.asarray(mom2)[idx]
    lam = np.array([mom[p + 1 + j] for j in range(p + 1)])
    try:
        np.linalg.cholesky(gamma)
    except np.linalg.LinAlgError:  # pragma: no cover - impossible for supported kernels
        raise AssertionError("kernel moment matrix is not positive definite")
    for arr in (gamma, psi, lam):
        arr.setflags(write=False)
    return KernelMoments(spec, p, side, gamma, lam, psi)
