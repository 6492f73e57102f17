"""Regression discontinuity designs with distribution-valued outcomes."""

from .bandwidth import BandwidthPlan, select_bandwidths
from .data import (QuantileCurve, QuantileGrid, UnitRecord, UnitSample, empirical_qf,
                   load_units, winsorize, write_units)
from .errors import EstimationError, ParseError, R3DError, ValidationError, WeakFirstStageError
from .frechet import project_qf, rearrange
from .inference import InferenceReport
from .kernels import KernelSpec, Side, kernel_eval, kernel_moments
from .localpoly import EffectCurve, lp_weights
from .pipeline import estimate, fit_arrays

__version__ = "0.1.0"

__all__ = [
    "BandwidthPlan", "EffectCurve", "EstimationError", "InferenceReport", "KernelSpec",
    "ParseError", "QuantileCurve", "QuantileGrid", "R3DError", "Side", "UnitRecord",
    "UnitSample", "ValidationError", "WeakFirstStageError", "empirical_qf", "estimate",
    "fit_arrays", "kernel_eval", "kernel_moments", "load_units", "lp_weights", "project_qf",
    "rearrange", "select_bandwidths", "winsorize", "write_units",
]
