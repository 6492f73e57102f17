"""Unit-level micro-data and weighted empirical quantile functions.

A sample is a cross-section of aggregate units. Each unit carries a running
variable value, an optional treatment indicator, and a vector of within-unit
outcome draws (optionally with sampling weights). Estimation works on the
matrix of unit quantile functions evaluated on a common grid.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, TextIO, Union

import numpy as np

from .errors import ParseError, ValidationError

# Slack on cumulative-weight comparisons; absorbs float drift of cumsum.
CUMWEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class QuantileGrid:
    """Strictly increasing quantile levels inside ``[a, b]`` with ``0 < a``, ``b < 1``."""

    points: np.ndarray
    a: float = None
    b: float = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).ravel()
        if pts.size < 2:
            raise ValidationError("quantile grid needs at least 2 points")
        if not np.all(np.isfinite(pts)) or np.any(np.diff(pts) <= 0):
            raise ValidationError("quantile grid must be finite and strictly increasing")
        a = float(pts[0]) if self.a is None else float(self.a)
        b = float(pts[-1]) if self.b is None else float(self.b)
        if not (0.0 < a <= pts[0] and pts[-1] <= b < 1.0):
            raise ValidationError(f"grid must satisfy 0 < a <= q1 and qM <= b < 1 (a={a}, b={b})")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def uniform(cls, m: int = 95, a: float = 1e-6, b: float = 0.95 + 1e-6) -> "QuantileGrid":
        return cls(np.linspace(a, b, m), a, b)

    @classmethod
    def deciles(cls) -> "QuantileGrid":
        return cls(np.arange(1, 10) / 10.0)

    def __len__(self):
        return self.points.size

    def __eq__(self, other):
        if not isinstance(other, QuantileGrid):
            return NotImplemented
        return (
            self.a == other.a
            and self.b == other.b
            and np.array_equal(self.points, other.points)
        )

    __hash__ = None

    def subset(self, lo: float, hi: float) -> np.ndarray:
        """Boolean mask of grid points inside ``[lo, hi]``."""
        if lo > hi:
            raise ValidationError(f"empty quantile range [{lo}, {hi}]")
        mask = (self.points >= lo - 1e-12) & (self.points <= hi + 1e-12)
        if not mask.any():
            raise ValidationError(f"no grid point inside [{lo}, {hi}]")
        return mask


@dataclass(frozen=True)
class QuantileCurve:
    grid: QuantileGrid
    values: np.ndarray
    monotone_flag: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size != len(self.grid):
            raise ValidationError(f"curve has {v.size} values for a grid of {len(self.grid)}")
        if self.monotone_flag and np.any(np.diff(v) < 0):
            raise ValidationError("curve flagged monotone but values decrease")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.values) >= 0))


@dataclass(frozen=True)
class UnitRecord:
    id: str
    x: float
    draws: np.ndarray
    t: Optional[int] = None
    weights: Optional[np.ndarray] = None
    norm_weights: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        d = np.asarray(self.draws, dtype=float).ravel()
        if d.size == 0:
            raise ValidationError(f"unit {self.id!r} has zero draws")
        if not math.isfinite(self.x):
            raise ValidationError(f"unit {self.id!r} has non-finite running variable")
        d.setflags(write=False)
        object.__setattr__(self, "draws", d)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).ravel()
            _check_weights(w, d.size, self.id)
            w.setflags(write=False)
            nw = w / w.sum()
            nw.setflags(write=False)
            object.__setattr__(self, "weights", w)
            object.__setattr__(self, "norm_weights", nw)
        if self.t is not None and self.t not in (0, 1):
            raise ValidationError(f"unit {self.id!r}: treatment must be 0 or 1, got {self.t!r}")


def _check_weights(w, n, uid=None):
    where = f"unit {uid!r}: " if uid is not None else ""
    if w.size != n:
        raise ValidationError(f"{where}{w.size} weights for {n} draws")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValidationError(f"{where}weights must be finite and nonnegative")
    if not w.sum() > 0:
        raise ValidationError(f"{where}weights sum to zero")


@dataclass(frozen=True)
class UnitSample:
    """Immutable cross-section of units; ``x`` is already centered at the cutoff.

    ``min_per_side`` units are required on each side (2 by default); pass 0 to
    build descriptive samples such as RD-plot inputs.
    """

    units: tuple
    cutoff: float = 0.0
    min_per_side: int = 2
    diagnostics: tuple = ()

    def __post_init__(self):
        units = tuple(self.units)
        object.__setattr__(self, "units", units)
        ids = [u.id for u in units]
        if len(set(ids)) != len(ids):
            raise ValidationError("unit identifiers must be unique")
        xs = self.xs
        n_plus = int(np.sum(xs >= 0))
        n_minus = xs.size - n_plus
        if min(n_plus, n_minus) < self.min_per_side:
            raise ValidationError(
                f"need at least {self.min_per_side} units on each side of the cutoff "
                f"(got {n_minus} below, {n_plus} at or above)"
            )
        diags = list(self.diagnostics)
        singles = sum(1 for u in units if u.draws.size == 1)
        if singles and not any("single draw" in d for d in diags):
            msg = f"{singles} unit(s) have a single draw; their quantile functions are degenerate"
            warnings.warn(msg, stacklevel=3)
            diags.append(msg)
        object.__setattr__(self, "diagnostics", tuple(diags))

    def __len__(self):
        return len(self.units)

    @property
    def xs(self) -> np.ndarray:
        return np.fromiter((u.x for u in self.units), dtype=float, count=len(self.units))

    @property
    def ids(self) -> list:
        return [u.id for u in self.units]

    @property
    def has_treatment(self) -> bool:
        return all(u.t is not None for u in self.units)

    @property
    def ts(self) -> np.ndarray:
        if not self.has_treatment:
            raise ValidationError("treatment indicator missing for some units")
        return np.fromiter((u.t for u in self.units), dtype=float, count=len(self.units))

    def quantile_matrix(self, grid: QuantileGrid) -> np.ndarray:
        """Unit quantile functions on ``grid`` as an ``(n, M)`` array."""
        return quantile_matrix([u.draws for u in self.units],
                               [u.norm_weights for u in self.units], grid)


def _qf_indices(cw: np.ndarray, q: np.ndarray) -> np.ndarray:
    # smallest index j with cw[j] >= q
    idx = np.searchsorted(cw, q - CUMWEIGHT_TOL, side="left")
    return np.minimum(idx, cw.size - 1)


def empirical_qf(draws, weights=None, grid: Union[QuantileGrid, Sequence[float]] = None) -> QuantileCurve:
    """Left-continuous inverse ``inf{x : F(x) >= q}`` of the (weighted) empirical cdf.

    >>> float(empirical_qf([1, 2, 3, 4], grid=QuantileGrid([0.5, 0.51])).values[0])
    2.0
    """
    if not isinstance(grid, QuantileGrid):
        grid = QuantileGrid(grid)
    values = quantile_values(draws, weights, grid.points)
    return QuantileCurve(grid, values, monotone_flag=True)


def quantile_values(draws, weights, q):
    """Type-1 quantiles of one unit at arbitrary levels ``q`` in ``(0, 1]``."""
    d = np.asarray(draws, dtype=float).ravel()
    if d.size == 0:
        raise ValidationError("empirical quantile of an empty sample")
    if weights is None:
        srt = np.sort(d)
        cw = np.arange(1, d.size + 1) / d.size
    else:
        w = np.asarray(weights, dtype=float).ravel()
        _check_weights(w, d.size)
        order = np.argsort(d, kind="stable")
        srt = d[order]
        cw = np.cumsum(w[order])
        cw = cw / cw[-1]
    return srt[_qf_indices(cw, np.asarray(q, dtype=float))]


def quantile_matrix(draws: Sequence[np.ndarray], weights: Sequence[Optional[np.ndarray]],
                    grid: QuantileGrid) -> np.ndarray:
    """Stack unit quantile functions; unweighted units of equal size are batched."""
    q = grid.points
    n = len(draws)
    out = np.empty((n, q.size))
    batches = {}
    for i, (d, w) in enumerate(zip(draws, weights)):
        if w is None:
            batches.setdefault(len(d), []).append(i)
        else:
            out[i] = quantile_values(d, w, q)
    for size, rows in batches.items():
        z = np.stack([draws[i] for i in rows])
        out[rows] = _batched_qf(z, q)
    return out


def _batched_qf(z: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Unweighted type-1 quantiles along axis 1 of a 2-D array."""
    size = z.shape[1]
    idx = _qf_indices(np.arange(1, size + 1) / size, q)
    kth = np.unique(idx)
    part = np.partition(z, kth, axis=1)
    return part[:, idx]


def winsorize(draws, upper: float, weights=None) -> np.ndarray:
    """Replace draws above the (weighted) ``upper`` quantile by that quantile."""
    if not 0.0 < upper <= 1.0:
        raise ValidationError(f"winsorization level must be in (0, 1], got {upper}")
    d = np.asarray(draws, dtype=float)
    cap = quantile_values(d, weights, np.array([upper]))[0]
    return np.minimum(d, cap)


# ---------------------------------------------------------------- CSV I/O

REQUIRED_COLUMNS = ("unit_id", "x", "z")


def load_units(source: Union[str, bytes, TextIO, io.IOBase], cutoff: float = 0.0,
               fuzzy: bool = False, min_per_side: int = 2) -> UnitSample:
    """Read the long CSV format ``unit_id,x,t,z,w`` (``t`` and ``w`` optional).

    One row per within-unit draw. ``x`` is centered by subtracting ``cutoff``.
    """
    if isinstance(source, bytes):
        source = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        source = io.StringIO(source)
    elif isinstance(source, io.BufferedIOBase) or (
        hasattr(source, "mode") and "b" in getattr(source, "mode", "")
    ):
        source = io.TextIOWrapper(source, encoding="utf-8")

    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty input, header required", line=1) from None
    header = [h.strip().lstrip("﻿") for h in header]
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise ParseError(f"header lacks required column(s) {missing}", line=1)
    col = {name: header.index(name) for name in header}
    has_t = "t" in col
    has_w = "w" in col
    if fuzzy and not has_t:
        raise ValidationError("fuzzy design requires a 't' column")

    order = []
    acc = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        uid = row[col["unit_id"]].strip()
        if not uid:
            raise ParseError("empty unit_id", line=lineno)
        x = _parse_float(row[col["x"]], "x", lineno)
        z = _parse_float(row[col["z"]], "z", lineno)
        t = None
        if has_t and row[col["t"]].strip() != "":
            tv = _parse_float(row[col["t"]], "t", lineno)
            if tv not in (0.0, 1.0):
                raise ParseError(f"t must be 0 or 1, got {row[col['t']]!r}", line=lineno)
            t = int(tv)
        w = _parse_float(row[col["w"]], "w", lineno) if has_w else None
        if uid not in acc:
            order.append(uid)
            acc[uid] = {"x": x, "t": t, "z": [], "w": [], "line": lineno}
        else:
            rec = acc[uid]
            if rec["x"] != x:
                raise ParseError(f"unit {uid!r} has inconsistent x values", line=lineno)
            if rec["t"] != t:
                raise ParseError(f"unit {uid!r} has inconsistent t values", line=lineno)
        acc[uid]["z"].append(z)
        if has_w:
            acc[uid]["w"].append(w)

    units = []
    for uid in order:
        rec = acc[uid]
        if fuzzy and rec["t"] is None:
            raise ValidationError(f"fuzzy design: unit {uid!r} has no treatment value")
        units.append(UnitRecord(
            id=uid,
            x=rec["x"] - cutoff,
            draws=np.array(rec["z"]),
            t=rec["t"],
            weights=np.array(rec["w"]) if has_w else None,
        ))
    return UnitSample(tuple(units), cutoff=cutoff, min_per_side=min_per_side)


def _parse_float(text, name, lineno):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"non-numeric {name} value {text!r}", line=lineno) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite {name} value {text!r}", line=lineno)
    return v


def write_units(sample: UnitSample, stream: TextIO) -> None:
    """Write the long CSV format; ``x`` is written cutoff-centered."""
    has_t = any(u.t is not None for u in sample.units)
    has_w = any(u.weights is not None for u in sample.units)
    cols = ["unit_id", "x"] + (["t"] if has_t else []) + ["z"] + (["w"] if has_w else [])
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(cols)
    for u in sample.units:
        for j, z in enumerate(u.draws):
            row = [u.id, repr(float(u.x))]
            if has_t:
                row.append("" if u.t is None else str(u.t))
            row.append(repr(float(z)))
            if has_w:
                row.append(repr(float(u.weights[j])) if u.weights is not None else "1.0")
            writer.writerow(row)


def sample_from_arrays(xs: Iterable[float], draws: Sequence[np.ndarray], ts=None,
                       ids=None, min_per_side: int = 2) -> UnitSample:
    xs = list(xs)
    if ids is None:
        ids = [str(i) for i in range(len(xs))]
    units = tuple(
        UnitRecord(id=ids[i], x=float(xs[i]), draws=draws[i],
                   t=None if ts is None else int(ts[i]))
        for i in range(len(xs))
    )
    return UnitSample(units, min_per_side=min_per_side)
