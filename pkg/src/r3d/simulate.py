"""Simulation designs, true-effect oracles and the Monte Carlo harness."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import stats

from .bandwidth import select_bandwidths
from .data import QuantileCurve, QuantileGrid, UnitRecord, UnitSample, _batched_qf
from .errors import R3DError, ValidationError
from .pipeline import fit_arrays

log = logging.getLogger(__name__)

# Effect sizes matching standardized effects of 0.5 and 1.
PRESETS = {
    "dgp1": {"d05": 1.14, "d10": 2.27},
    "dgp2": {"d05": 1.86, "d10": 3.72},
}


def resolve_delta(dgp: str, delta) -> float:
    if isinstance(delta, str):
        try:
            return PRESETS[dgp][delta]
        except KeyError:
            try:
                return float(delta)
            except ValueError:
                raise ValidationError(f"unknown effect preset {delta!r} for {dgp}") from None
    return float(delta)


# ------------------------------------------------------------- generators

def dgp1_arrays(n: int, n_i: int, delta: float, rng: np.random.Generator):
    """Normal outcomes with normal means; returns ``(x, t, draws)``."""
    x = rng.uniform(-1.0, 1.0, n)
    treated = (x >= 0).astype(float)
    mu = rng.normal(5.0 + 5.0 * x + treated * delta, 1.0)
    sigma = np.abs(rng.normal(1.0 + x, 1.0))
    draws = mu[:, None] + sigma[:, None] * rng.standard_normal((n, n_i))
    return x, treated, draws


def dgp2_arrays(n: int, n_i: int, delta: float, delta_lambda: float, rng: np.random.Generator):
    """Normal plus scaled exponential outcomes; exponential rates shift at the cutoff."""
    x = rng.uniform(-1.0, 1.0, n)
    treated = (x >= 0).astype(float)
    mu = rng.uniform(-5.0, 5.0, n) + 2.0 * x
    lam = rng.uniform(0.5, 1.5, n)
    rate = lam + treated * delta_lambda
    if np.any(rate <= 0):
        raise ValidationError("exponential rate must stay positive; increase delta_lambda")
    draws = (mu + treated * delta)[:, None] + rng.standard_normal((n, n_i))
    draws += 2.0 * rng.standard_exponential((n, n_i)) / rate[:, None]
    return x, treated, draws


def _to_sample(x, t, draws) -> UnitSample:
    units = tuple(UnitRecord(id=str(i), x=float(x[i]), draws=draws[i], t=int(t[i]))
                  for i in range(x.size))
    return UnitSample(units)


def gen_dgp1(n: int, n_i: int, delta: float, rng: np.random.Generator) -> UnitSample:
    return _to_sample(*dgp1_arrays(n, n_i, delta, rng))


def gen_dgp2(n: int, n_i: int, delta: float, delta_lambda: float,
             rng: np.random.Generator) -> UnitSample:
    if 0.5 + delta_lambda <= 0:
        raise ValidationError("delta_lambda must keep every exponential rate positive")
    return _to_sample(*dgp2_arrays(n, n_i, delta, delta_lambda, rng))


# ----------------------------------------------------------------- truths

def true_effect_dgp1(delta: float, grid: QuantileGrid) -> QuantileCurve:
    return QuantileCurve(grid, np.full(len(grid), float(delta)), monotone_flag=True)


def _expnorm_quantile(q, rate, iters=80):
    """Quantile of ``N(0,1) + 2 Exp(rate)`` by vectorized bisection on the closed-form cdf."""
    q, rate = np.broadcast_arrays(np.asarray(q, float), np.asarray(rate, float))
    k = 2.0 / rate
    lo = stats.norm.ppf(q) - 1e-9
    # P(N + E > a + b) <= P(N > a) + P(E > b), each tail set to (1 - q) / 2
    tail = 0.5 * (1.0 - q)
    hi = stats.norm.isf(tail) - k * np.log(tail) + 1e-9
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = stats.exponnorm.cdf(mid, k) < q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def true_effect_dgp2(delta: float, delta_lambda: float, grid: QuantileGrid,
                     oracle_n: int = 100_000, seed: int = 12345):
    """Average-quantile difference at the cutoff by simulating unit distributions.

    Units on both sides share the simulated ``(mu, lambda)`` draws; the mean
    shift cancels exactly and only the rate shift needs simulation. Returns
    ``(curve, standard_error)``.
    """
    if oracle_n < 100_000:
        raise ValidationError("oracle needs at least 1e5 simulated distributions")
    if 0.5 + delta_lambda <= 0:
        raise ValidationError("delta_lambda must keep every exponential rate positive")
    rng = np.random.default_rng(seed)
    lam = rng.uniform(0.5, 1.5, oracle_n)
    q = grid.points
    # quantiles are smooth in the rate: tabulate then interpolate
    table_rates = np.linspace(0.5, 1.5 + max(delta_lambda, 0.0), 2001)
    table_rates = np.union1d(table_rates, np.linspace(0.5 + min(delta_lambda, 0.0), 1.5, 2001))
    table = _expnorm_quantile(q[None, :], table_rates[:, None])
    diffs = np.empty((oracle_n, q.size))
    for j in range(q.size):
        treated = np.interp(lam + delta_lambda, table_rates, table[:, j])
        control = np.interp(lam, table_rates, table[:, j])
        diffs[:, j] = delta + treated - control
    values = diffs.mean(axis=0)
    se = diffs.std(axis=0, ddof=1) / math.sqrt(oracle_n)
    return QuantileCurve(grid, values), se


# ---------------------------------------------------------------- harness

@dataclass(frozen=True)
class SimConfig:
    dgp: str = "dgp1"
    n: int = 500
    n_i: int = 500
    delta: float = 0.0
    delta_lambda: float = 0.0
    reps: int = 100
    B: int = 500
    level: float = 0.05
    estimators: Tuple[str, ...] = ("frechet",)
    p: int = 2
    s: Optional[int] = None
    seed: int = 0
    kernel: str = "triangular"
    coverage_correction: bool = False
    pilot_guess: str = "global"
    regularize: bool = True
    grid: Tuple[float, ...] = tuple(np.round(np.arange(1, 10) / 10, 10))
    oracle_n: int = 100_000
    threads: int = 1

    def __post_init__(self):
        if self.dgp not in ("dgp1", "dgp2"):
            raise ValidationError(f"dgp must be dgp1 or dgp2, got {self.dgp!r}")
        object.__setattr__(self, "delta", resolve_delta(self.dgp, self.delta))
        est = self.estimators
        if isinstance(est, str):
            est = tuple(e.strip() for e in est.split(","))
        object.__setattr__(self, "estimators", tuple(est))
        for e in self.estimators:
            if e not in ("frechet", "localpoly"):
                raise ValidationError(f"unknown estimator {e!r}")
        if self.n < 50:
            raise ValidationError("simulations need n >= 50")
        if self.reps < 1:
            raise ValidationError("reps must be >= 1")
        if self.B and self.B < 100:
            raise ValidationError("coverage runs need B >= 100 (or B = 0 for estimates only)")
        if self.dgp == "dgp2" and 0.5 + self.delta_lambda <= 0:
            raise ValidationError("delta_lambda must keep every exponential rate positive")
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))


@dataclass
class EstimatorSummary:
    estimator: str
    reps_ok: int
    failures: int
    failure_messages: list
    mean: list
    bias: list
    relative_bias: list
    variance: list
    mean_abs_error: float
    coverage: Optional[float] = None
    coverage_se: Optional[float] = None
    accept_nullity: Optional[float] = None
    accept_nullity_se: Optional[float] = None
    accept_homogeneity: Optional[float] = None
    accept_homogeneity_se: Optional[float] = None


@dataclass
class SimReport:
    config: dict
    truth: list
    truth_se: Optional[list]
    estimators: dict
    seconds_total: float
    seconds_per_rep: float
    tau_draws: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("tau_draws")
        return json.dumps(_clean(d), indent=2, sort_keys=True)

    def write_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["estimator", "quantile", "truth", "mean", "bias", "relative_bias", "variance"])
        for name, s in self.estimators.items():
            for j, q in enumerate(self.config["grid"]):
                w.writerow([name, q, self.truth[j], s.mean[j], s.bias[j],
                            s.relative_bias[j], s.variance[j]])
        w.writerow([])
        w.writerow(["estimator", "coverage", "accept_nullity", "accept_homogeneity",
                    "reps_ok", "failures"])
        for name, s in self.estimators.items():
            w.writerow([name, s.coverage, s.accept_nullity, s.accept_homogeneity,
                        s.reps_ok, s.failures])


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def replicate_seed(seed: int, rep: int, stream: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(rep, stream)).generate_state(1, np.uint64)[0])


def _data_rng(seed, rep):
    return np.random.default_rng(replicate_seed(seed, rep, 0))


def run_replicate(config: SimConfig, rep: int, truth: np.ndarray) -> dict:
    """Generate one dataset and evaluate every configured estimator on it."""
    rng = _data_rng(config.seed, rep)
    grid = QuantileGrid(config.grid)
    if config.dgp == "dgp1":
        x, _, draws = dgp1_arrays(config.n, config.n_i, config.delta, rng)
    else:
        x, _, draws = dgp2_arrays(config.n, config.n_i, config.delta, config.delta_lambda, rng)
    qmat = _batched_qf(draws, grid.points)
    del draws
    s = config.p - 1 if config.s is None else config.s
    out = {}
    try:
        plan = select_bandwidths(x, qmat, grid, s, config.kernel,
                                 coverage_correction=config.coverage_correction,
                                 pilot_guess=config.pilot_guess,
                                 regularize=config.regularize)
    except R3DError as exc:
        return {e: {"error": f"bandwidth: {exc}"} for e in config.estimators}
    boot_seed = replicate_seed(config.seed, rep, 1)
    for est in config.estimators:
        try:
            rep_out = fit_arrays(x, qmat, grid, method=est, p=config.p, s=s,
                                 kernel=config.kernel, plan=plan, B=config.B,
                                 level=config.level, seed=boot_seed)
        except R3DError as exc:
            out[est] = {"error": str(exc)}
            continue
        rec = {"tau": rep_out.effect.tau,
               "h": plan.h_frechet if est == "frechet" else float(np.mean(plan.h1))}
        if config.B:
            rec["covered"] = rep_out.covers(truth)
            rec["p_nullity"] = rep_out.p_nullity
            rec["p_homogeneity"] = rep_out.p_homogeneity
        out[est] = rec
    return out


def _rate(flags):
    flags = np.asarray(flags, dtype=float)
    if flags.size == 0:
        return None, None
    r = float(flags.mean())
    return r, float(math.sqrt(r * (1 - r) / flags.size))


def _worker(args):
    config, rep, truth = args
    return run_replicate(config, rep, truth)


def monte_carlo(config: SimConfig) -> SimReport:
    """Repeat generate / select bandwidth / estimate / bootstrap ``reps`` times."""
    grid = QuantileGrid(config.grid)
    truth_se = None
    if config.dgp == "dgp1":
        truth = true_effect_dgp1(config.delta, grid).values
    else:
        curve, se = true_effect_dgp2(config.delta, config.delta_lambda, grid, config.oracle_n)
        truth, truth_se = curve.values, se.tolist()

    start = time.perf_counter()
    jobs = [(config, r, truth) for r in range(config.reps)]
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(_worker, jobs, chunksize=4))
    else:
        results = [_worker(j) for j in jobs]
    elapsed = time.perf_counter() - start

    summaries = {}
    tau_draws = {}
    for est in config.estimators:
        recs = [r[est] for r in results]
        ok = [r for r in recs if "error" not in r]
        errors = [r["error"] for r in recs if "error" in r]
        if errors:
            log.warning("%s: %d replicate(s) failed", est, len(errors))
        if ok:
            taus = np.stack([r["tau"] for r in ok])
        else:
            taus = np.full((0, len(grid)), np.nan)
        tau_draws[est] = taus
        mean = taus.mean(axis=0) if ok else np.full(len(grid), np.nan)
        bias = mean - truth
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(truth != 0, np.abs(bias) / np.abs(truth), np.nan)
        var = taus.var(axis=0, ddof=1) if len(ok) > 1 else np.zeros(len(grid))
        summ = EstimatorSummary(
            estimator=est, reps_ok=len(ok), failures=len(errors),
            failure_messages=sorted(set(errors))[:10],
            mean=mean.tolist(), bias=bias.tolist(), relative_bias=rel.tolist(),
            variance=var.tolist(),
            mean_abs_error=float(np.mean(np.abs(bias))),
        )
        if config.B and ok:
            summ.coverage, summ.coverage_se = _rate([r["covered"] for r in ok])
            summ.accept_nullity, summ.accept_nullity_se = _rate(
                [r["p_nullity"] > config.level for r in ok])
            summ.accept_homogeneity, summ.accept_homogeneity_se = _rate(
                [r["p_homogeneity"] > config.level for r in ok])
        summaries[est] = summ

    cfg = asdict(config)
    return SimReport(cfg, truth.tolist(), truth_se, summaries, elapsed,
                     elapsed / config.reps, tau_draws)
