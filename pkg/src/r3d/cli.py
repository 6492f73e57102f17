"""Command-line front end: ``estimate``, ``simulate``, ``rdplot`` and ``bench``.

Exit codes: 0 success, 2 invalid input or flags, 3 estimation failure
(singular design, weak first stage), 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bandwidth import select_bandwidths
from .data import QuantileGrid, UnitSample, _batched_qf, load_units
from .errors import R3DError, ValidationError
from .inference import bootstrap_draws, process_loadings, residuals
from .kernels import KernelSpec, Side
from .localpoly import lp_weights
from .pipeline import estimate
from .simulate import SimConfig, dgp1_arrays, monte_carlo

log = logging.getLogger("r3d")

THREADS_ENV = "R3D_THREADS"
EXIT_OK, EXIT_VALIDATION, EXIT_ESTIMATION, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------- helpers

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, shortest round-trip floats."""
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def parse_grid(text: str) -> QuantileGrid:
    """``a,b,M`` -> ``M`` equally spaced quantile levels on ``[a, b]``."""
    try:
        a, b, m = text.split(",")
        return QuantileGrid.uniform(int(m), float(a), float(b))
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"--grid expects a,b,M (got {text!r})") from None


def parse_range(text: Optional[str]):
    if text is None:
        return None
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise ValidationError(f"--test-range expects lo,hi (got {text!r})") from None
    if not lo < hi:
        raise ValidationError("--test-range needs lo < hi")
    return lo, hi


def resolve_threads(flag: Optional[int]) -> int:
    """Flag wins over the environment variable, which wins over the CPU count."""
    if flag is not None:
        k = flag
    elif os.environ.get(THREADS_ENV):
        try:
            k = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} must be an integer") from None
    else:
        k = os.cpu_count() or 1
    if k < 1:
        raise ValidationError("thread count must be >= 1")
    return k


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _read_input(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return fh.read()


def _emit(text: str, out: Optional[str]) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# --------------------------------------------------------------- estimate

def report_document(report, grid: QuantileGrid, config: dict) -> dict:
    """Serialize an :class:`InferenceReport` into the documented JSON schema."""
    plan = report.bandwidths
    return {
        "meta": {"version": __version__, "config": config, "seed": report.seed,
                 "method": report.method, "variant": report.effect.variant.value,
                 "B": report.B, "level": report.level,
                 "critical_value": report.critical_value,
                 "stat_nullity": report.stat_nullity,
                 "stat_homogeneity": report.stat_homogeneity,
                 "test_range": report.test_range},
        "grid": grid.points,
        "tau": report.effect.tau,
        "band_low": report.band_low,
        "band_high": report.band_high,
        "p_nullity": report.p_nullity,
        "p_homogeneity": report.p_homogeneity,
        "bandwidths": plan.as_dict() if plan is not None else None,
        "diagnostics": list(report.diagnostics),
    }


def report_csv(doc: dict) -> str:
    rows = [["quantile", "tau", "band_low", "band_high", "h1"]]
    m = len(doc["grid"])
    low = doc["band_low"] if doc["band_low"] is not None else [None] * m
    high = doc["band_high"] if doc["band_high"] is not None else [None] * m
    h1 = doc["bandwidths"]["h1"]
    for j in range(m):
        rows.append([doc["grid"][j], doc["tau"][j], low[j], high[j], h1[j]])
    rows.append([])
    rows.append(["p_nullity", doc["p_nullity"]])
    rows.append(["p_homogeneity", doc["p_homogeneity"]])
    rows.append(["h_frechet", doc["bandwidths"]["h_frechet"]])
    rows.append(["h2", doc["bandwidths"]["h2"]])
    return _csv_text(rows)


def run_estimate(args) -> dict:
    grid = parse_grid(args.grid) if args.grid else QuantileGrid.uniform()
    sample = load_units(_read_input(args.input), cutoff=args.cutoff, fuzzy=args.fuzzy)
    if args.rearrange and args.method != "localpoly":
        raise ValidationError("--rearrange applies to --method localpoly only")
    config = {
        "input": args.input, "cutoff": args.cutoff, "kernel": args.kernel,
        "order": args.order, "pilot_order": args.pilot_order, "method": args.method,
        "rearrange": args.rearrange, "bandwidth": args.bandwidth,
        "coverage_correction": args.coverage_correction, "bootstrap": args.bootstrap,
        "level": args.level, "seed": args.seed, "test_range": args.test_range,
        "fuzzy": args.fuzzy, "grid": [grid.points[0], grid.points[-1], len(grid)],
    }
    report = estimate(
        sample, grid=grid, fuzzy=args.fuzzy, method=args.method, p=args.order,
        s=args.pilot_order, kernel=args.kernel, bandwidth=args.bandwidth,
        coverage_correction=args.coverage_correction, rearrange=args.rearrange,
        B=args.bootstrap, level=args.level, seed=args.seed,
        test_range=parse_range(args.test_range),
    )
    return report_document(report, grid, config)


# --------------------------------------------------------------- simulate

def run_simulate(args):
    dgp = args.dgp if args.dgp.startswith("dgp") else f"dgp{args.dgp}"
    grid = parse_grid(args.grid).points if args.grid else SimConfig.grid
    cfg = SimConfig(dgp=dgp, n=args.n, n_i=args.ni, delta=args.delta,
                    delta_lambda=args.delta_lambda, reps=args.reps, B=args.bootstrap,
                    level=args.level, estimators=args.estimator, p=args.order,
                    s=args.pilot_order, seed=args.seed, kernel=args.kernel,
                    coverage_correction=args.coverage_correction,
                    grid=tuple(float(g) for g in grid),
                    threads=resolve_threads(args.threads))
    return monte_carlo(cfg)


# ----------------------------------------------------------------- rdplot

def rdplot_data(sample: UnitSample, grid: QuantileGrid, width: float = 0.01,
                degree: int = 2) -> dict:
    """Bin-averaged unit quantiles and per-side global polynomial fits.

    Bins of ``width`` are aligned so that the cutoff is a bin edge; they
    cover the observed range of ``x``. Empty bins are kept with count 0.
    Fits are least squares on the nonempty bin means (bin centers as
    regressors); with too few bins the degree drops and the missing
    coefficients are reported as 0.
    """
    if not width > 0:
        raise ValidationError("bin width must be positive")
    xs = sample.xs
    qmat = sample.quantile_matrix(grid)
    idx = np.floor(xs / width).astype(np.int64)
    lo, hi = int(idx.min()), int(idx.max())
    nb = hi - lo + 1
    counts = np.bincount(idx - lo, minlength=nb)
    sums = np.zeros((nb, len(grid)))
    np.add.at(sums, idx - lo, qmat)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts[:, None]
    edges = (np.arange(lo, hi + 2)) * width
    centers = 0.5 * (edges[:-1] + edges[1:])

    fits = {}
    for side in (Side.MINUS, Side.PLUS):
        sel = (counts > 0) & (side.mask(centers))
        coef = np.zeros((len(grid), degree + 1))
        if np.any(sel):
            deg = min(degree, int(sel.sum()) - 1)
            c = np.polynomial.polynomial.polyfit(centers[sel], means[sel], deg)
            coef[:, :deg + 1] = np.atleast_2d(c.T).reshape(len(grid), deg + 1)
        fits[side.value] = coef
    return {"edges": edges, "centers": centers, "counts": counts, "means": means,
            "grid": grid.points, "fits": fits}


def rdplot_document(data: dict) -> dict:
    bins = []
    for b, c in enumerate(data["centers"]):
        n = int(data["counts"][b])
        bins.append({"low": data["edges"][b], "high": data["edges"][b + 1], "center": c,
                     "count": n, "mean": data["means"][b] if n else None})
    return {"grid": data["grid"], "bins": bins,
            "fits": {k: {"coefficients": v, "intercept": v[:, 0]}
                     for k, v in data["fits"].items()}}


def rdplot_csv(data: dict) -> str:
    rows = [["bin_center", "quantile", "mean", "count"]]
    for b, c in enumerate(data["centers"]):
        n = int(data["counts"][b])
        for j, q in enumerate(data["grid"]):
            rows.append([c, q, data["means"][b, j] if n else None, n])
    rows.append([])
    deg = next(iter(data["fits"].values())).shape[1]
    rows.append(["side", "quantile"] + [f"c{k}" for k in range(deg)])
    for side, coef in data["fits"].items():
        for j, q in enumerate(data["grid"]):
            rows.append([side, q] + list(coef[j]))
    return _csv_text(rows)


def run_rdplot(args) -> dict:
    grid = parse_grid(args.grid) if args.grid else QuantileGrid.deciles()
    sample = load_units(_read_input(args.input), cutoff=args.cutoff, min_per_side=0)
    return rdplot_data(sample, grid, args.bin_width)


# ------------------------------------------------------------------ bench

def bench_once(n: int, n_i: int, m: int, B: int, seed: int = 0, p: int = 2,
               kernel="triangular") -> dict:
    """Time the quantile, weight and bootstrap stages on one synthetic dataset."""
    rng = np.random.default_rng(seed)
    x, _, draws = dgp1_arrays(n, n_i, 2.0, rng)
    grid = QuantileGrid.uniform(m, 0.05, 0.95)
    kernel = KernelSpec.parse(kernel)

    t0 = time.perf_counter()
    qmat = _batched_qf(draws, grid.points)
    t1 = time.perf_counter()
    plan = select_bandwidths(x, qmat, grid, p - 1, kernel, coverage_correction=True)
    h = plan.h_frechet
    wp = lp_weights(x, h, p, Side.PLUS, kernel)
    wm = lp_weights(x, h, p, Side.MINUS, kernel)
    tau = wp.weights @ qmat - wm.weights @ qmat
    t2 = time.perf_counter()
    if B:
        res = residuals(x, qmat, np.full(m, h), p, kernel, project=True)
        loads = process_loadings(res, p, kernel, plan.density_at_cutoff, h)
        draws_b = bootstrap_draws(loads, B, seed)
        checksum = float(np.abs(draws_b).max())
    else:
        checksum = 0.0
    t3 = time.perf_counter()
    return {"n": n, "n_i": n_i, "grid": m, "B": B,
            "quantiles": t1 - t0, "weights": t2 - t1, "bootstrap": t3 - t2,
            "total": t3 - t0, "tau_median": float(np.median(tau)), "checksum": checksum}


def run_bench(args) -> dict:
    sizes = [int(v) for v in args.sizes.split(",")]
    rows = [bench_once(n, args.ni, args.grid_points, args.bootstrap, args.seed)
            for n in sizes]
    ratio = rows[-1]["total"] / rows[0]["total"] if len(rows) > 1 else None
    return {"rows": rows, "size_ratio": sizes[-1] / sizes[0] if len(rows) > 1 else None,
            "time_ratio": ratio}


def bench_text(result: dict) -> str:
    head = f"{'n':>8} {'n_i':>6} {'M':>4} {'B':>6} {'quantiles':>10} {'weights':>10} " \
           f"{'bootstrap':>10} {'total':>10}\n"
    lines = [head]
    for r in result["rows"]:
        lines.append(f"{r['n']:>8} {r['n_i']:>6} {r['grid']:>4} {r['B']:>6} "
                     f"{r['quantiles']:>10.4f} {r['weights']:>10.4f} "
                     f"{r['bootstrap']:>10.4f} {r['total']:>10.4f}\n")
    if result["time_ratio"] is not None:
        lines.append(f"size x{result['size_ratio']:g} -> time x{result['time_ratio']:.2f}\n")
    return "".join(lines)


# ----------------------------------------------------------------- parser

def _add_estimation_flags(p, defaults_cc: bool):
    p.add_argument("--kernel", choices=[k.value for k in KernelSpec], default="triangular")
    p.add_argument("--order", type=int, default=2, help="local polynomial order p")
    p.add_argument("--pilot-order", type=int, default=None,
                   help="order s the bandwidths are optimal for (default p-1)")
    p.add_argument("--coverage-correction", type=_on_off, default=defaults_cc,
                   metavar="{on,off}")
    p.add_argument("--bootstrap", type=int, default=5000, metavar="B")
    p.add_argument("--level", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", default=None, metavar="a,b,M")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="r3d", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"r3d {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    pe = sub.add_parser("estimate", help="estimate effects and uniform bands from a CSV")
    pe.add_argument("input", help="long-format CSV (unit_id,x,z[,t][,w]); '-' for stdin")
    pe.add_argument("--cutoff", type=float, default=0.0)
    pe.add_argument("--method", choices=["frechet", "localpoly"], default="frechet")
    pe.add_argument("--rearrange", action="store_true")
    pe.add_argument("--bandwidth", type=float, default=None)
    pe.add_argument("--test-range", default=None, metavar="lo,hi")
    pe.add_argument("--fuzzy", action="store_true")
    pe.add_argument("--format", choices=["json", "csv"], default="json")
    _add_estimation_flags(pe, defaults_cc=True)

    ps = sub.add_parser("simulate", help="Monte Carlo study on the built-in designs")
    ps.add_argument("--dgp", choices=["1", "2", "dgp1", "dgp2"], default="1")
    ps.add_argument("--n", type=int, default=500)
    ps.add_argument("--ni", type=int, default=500)
    ps.add_argument("--delta", default="0", help="effect size or preset d05/d10")
    ps.add_argument("--delta-lambda", type=float, default=0.0)
    ps.add_argument("--reps", type=int, default=100)
    ps.add_argument("--estimator", default="frechet", help="comma list of frechet,localpoly")
    ps.add_argument("--format", choices=["json", "csv"], default="json")
    _add_estimation_flags(ps, defaults_cc=False)
    ps.set_defaults(bootstrap=500, level=0.05)

    pr = sub.add_parser("rdplot", help="binned quantile averages and global fits")
    pr.add_argument("input")
    pr.add_argument("--cutoff", type=float, default=0.0)
    pr.add_argument("--bin-width", type=float, default=0.01)
    pr.add_argument("--grid", default=None, metavar="a,b,M")
    pr.add_argument("--format", choices=["json", "csv"], default="csv")
    pr.add_argument("--out", default=None)

    pb = sub.add_parser("bench", help="stage timings over a size ladder")
    pb.add_argument("--sizes", default="500,5000")
    pb.add_argument("--ni", type=int, default=500)
    pb.add_argument("--grid-points", type=int, default=20)
    pb.add_argument("--bootstrap", type=int, default=200)
    pb.add_argument("--seed", type=int, default=0)
    pb.add_argument("--format", choices=["text", "json"], default="text")
    pb.add_argument("--out", default=None)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="r3d: %(levelname)s: %(message)s")
    try:
        if args.command == "estimate":
            resolve_threads(args.threads)
            doc = run_estimate(args)
            _emit(dumps(doc) if args.format == "json" else report_csv(doc), args.out)
        elif args.command == "simulate":
            rep = run_simulate(args)
            if args.format == "json":
                _emit(rep.to_json() + "\n", args.out)
            else:
                buf = io.StringIO()
                rep.write_csv(buf)
                _emit(buf.getvalue(), args.out)
        elif args.command == "rdplot":
            data = run_rdplot(args)
            _emit(rdplot_csv(data) if args.format == "csv" else dumps(rdplot_document(data)),
                  args.out)
        else:
            res = run_bench(args)
            _emit(bench_text(res) if args.format == "text" else dumps(res), args.out)
    except R3DError as exc:
        print(f"r3d: error: {exc}", file=sys.stderr)
        return exc.exit_code if exc.exit_code in (EXIT_VALIDATION, EXIT_ESTIMATION) \
            else EXIT_ESTIMATION
    except OSError as exc:
        print(f"r3d: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
