"""End-to-end acceptance checks.

Each test prints one ``[ACCEPT] ... PASS|FAIL`` line (collected again in the
terminal summary by ``conftest.py``) and asserts the criterion at its stated
tolerance. The Monte Carlo checks take several minutes on one core.
"""
import itertools
import time

import mpmath
import numpy as np
import pytest

from r3d.bandwidth import FirstStageFit, bias_factor, imse_bandwidth, mse_bandwidth, rot_adjust
from r3d.bandwidth import variance_factor
from r3d.data import QuantileCurve, QuantileGrid, _batched_qf
from r3d.errors import EstimationError
from r3d.frechet import project_qf
from r3d.kernels import KernelSpec, Side, kernel_eval
from r3d.localpoly import lp_weights
from r3d.pipeline import fit_arrays
from r3d.simulate import SimConfig, dgp1_arrays, monte_carlo

RESULTS = []
SEED = 20240601


def record(name, ok, detail):
    line = f"[ACCEPT] {name:<42} {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------- C1 weights

def dense_wls_weights(xs, h, p, side, kernel, digits=50):
    """Intercept weights ``e0'(X'KX)^{-1} X'K`` by a dense solve in 50-digit arithmetic.

    The raw-basis normal equations are formed and solved exactly enough that
    the oracle's own error is far below the tolerance being checked.
    """
    with mpmath.workdps(digits):
        k = kernel_eval(kernel, xs / h) * side.mask(xs)
        xm = [mpmath.mpf(float(v)) for v in xs]
        km = [mpmath.mpf(float(v)) for v in k]
        rows = [[x ** j for j in range(p + 1)] for x in xm]
        gram = mpmath.matrix(p + 1, p + 1)
        for a in range(p + 1):
            for b in range(p + 1):
                gram[a, b] = mpmath.fsum(ki * r[a] * r[b] for ki, r in zip(km, rows))
        e = mpmath.lu_solve(gram, mpmath.matrix([1] + [0] * p))
        return np.array([float(ki * mpmath.fsum(e[a] * r[a] for a in range(p + 1)))
                         for ki, r in zip(km, rows)])


def test_c1_weight_oracle():
    rng = np.random.default_rng(SEED)
    kernels, sides = list(KernelSpec), list(Side)
    t0 = time.perf_counter()
    designs, worst_w, worst_m = 0, 0.0, 0.0
    while designs < 1000:
        p = int(rng.integers(0, 4))
        n = int(rng.integers(p + 2, 51))
        xs = rng.uniform(-1, 1, n)
        h = float(rng.uniform(0.3, 1.5))
        kernel, side = kernels[designs % 3], sides[(designs // 3) % 2]
        inside = side.mask(xs) & (np.abs(xs) < h)
        if np.unique(xs[inside]).size < p + 2:
            continue
        if np.linalg.cond(np.vander(xs[inside], p + 1, increasing=True)) > 1e6:
            continue
        try:
            ws = lp_weights(xs, h, p, side, kernel)
        except EstimationError:
            continue
        oracle = dense_wls_weights(xs, h, p, side, kernel)
        worst_w = max(worst_w, float(np.max(np.abs(ws.weights - oracle))))
        u = xs / h
        moments = [abs(ws.weights.sum() - 1.0)] + [abs(ws.weights @ u ** k) for k in range(1, p + 1)]
        worst_m = max(worst_m, max(moments))
        designs += 1
    elapsed = time.perf_counter() - t0
    ok = worst_w <= 1e-10 and worst_m <= 1e-8 and elapsed < 10
    record("C1 weight oracle (1000 designs)", ok,
           f"max|w-oracle|={worst_w:.2e} max moment={worst_m:.2e} time={elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------- C2 projection

def brute_force_projection(values):
    """Exhaustive monotone projection of every row of ``values`` (K, M).

    Every consecutive-block partition gives a candidate (block means); the
    projection is the cheapest candidate whose block means are nondecreasing.
    """
    k, m = values.shape
    best = np.full((k, m), np.nan)
    best_cost = np.full(k, np.inf)
    for cuts in itertools.product([0, 1], repeat=m - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [m]
        avg = np.zeros((m, m))
        for a, b in zip(bounds[:-1], bounds[1:]):
            avg[a:b, a:b] = 1.0 / (b - a)
        cand = values @ avg
        # lattice means have denominators <= 6, so true violations exceed 1/30
        feasible = np.all(np.diff(cand, axis=1) >= -1e-9, axis=1)
        cost = np.sum((cand - values) ** 2, axis=1)
        better = feasible & (cost < best_cost - 1e-12)
        best[better], best_cost[better] = cand[better], cost[better]
    return best


def test_c2_projection_oracle():
    t0 = time.perf_counter()
    cases, worst = 0, 0.0
    for m in range(2, 7):
        grid = QuantileGrid(np.arange(1, m + 1) / (m + 1))
        lattice = np.array(list(itertools.product(range(5), repeat=m)), dtype=float)
        oracle = brute_force_projection(lattice)
        for v, o in zip(lattice, oracle):
            got = project_qf(QuantileCurve(grid, v)).values
            worst = max(worst, float(np.max(np.abs(got - o))))
        cases += len(lattice)

    rng = np.random.default_rng(SEED)
    idem, lip = 0.0, 0.0
    pairs = 10_000
    for _ in range(pairs):
        m = int(rng.integers(2, 41))
        grid = QuantileGrid(np.arange(1, m + 1) / (m + 1))
        a, b = rng.normal(size=m) * 5, rng.normal(size=m) * 5
        pa, pb = project_qf(QuantileCurve(grid, a)).values, project_qf(QuantileCurve(grid, b)).values
        idem = max(idem, float(np.max(np.abs(project_qf(QuantileCurve(grid, pa)).values - pa))))
        lip = max(lip, float(np.linalg.norm(pa - pb) - np.linalg.norm(a - b)))
    elapsed = time.perf_counter() - t0
    ok = cases >= 10_000 and worst <= 1e-9 and idem <= 1e-12 and lip <= 1e-12 and elapsed < 30
    record("C2 projection oracle", ok,
           f"lattice cases={cases} max err={worst:.1e} idempotence={idem:.1e} "
           f"lipschitz excess={lip:.1e} pairs={pairs} time={elapsed:.1f}s")
    assert ok


# ----------------------------------------------- shared Monte Carlo (C3, C4)

@pytest.fixture(scope="module")
def dgp1_n2000():
    cfg = SimConfig(dgp="dgp1", n=2000, n_i=2000, delta=2.0, reps=500, B=500, level=0.05,
                    estimators=("frechet", "localpoly"), seed=SEED)
    return monte_carlo(cfg)


@pytest.mark.slow
def test_c3_consistency_n2000(dgp1_n2000):
    mae = {k: s.mean_abs_error for k, s in dgp1_n2000.estimators.items()}
    fails = {k: s.failures for k, s in dgp1_n2000.estimators.items()}
    ok_mae = all(v < 0.2 for v in mae.values()) and not any(fails.values())
    record("C3a DGP1 n=2000 mean abs deviation < 0.2", ok_mae,
           " ".join(f"{k}={v:.4f}" for k, v in mae.items()) + f" failures={fails}")
    assert ok_mae


@pytest.mark.slow
def test_c3_small_sample_variance_ordering():
    small = monte_carlo(SimConfig(dgp="dgp1", n=200, n_i=2000, delta=2.0, reps=300, B=0,
                                  estimators=("frechet", "localpoly"), seed=SEED))
    var = {k: float(np.mean(s.variance)) for k, s in small.estimators.items()}
    ok_var = var["frechet"] <= var["localpoly"]
    record("C3b n=200 Frechet variance <= local poly", ok_var,
           f"frechet={var['frechet']:.4f} localpoly={var['localpoly']:.4f} reps=300")
    assert ok_var


@pytest.mark.slow
def test_c4_coverage_n2000(dgp1_n2000):
    s = dgp1_n2000.estimators["frechet"]
    ok = abs(100 * s.coverage - 94.2) <= 3.0 and s.failures == 0
    record("C4a coverage n=2000 within 94.2 +/- 3", ok,
           f"coverage={100 * s.coverage:.1f}% (se {100 * s.coverage_se:.1f}) reps={s.reps_ok}")
    assert ok


@pytest.mark.slow
def test_c4_coverage_n500():
    rep = monte_carlo(SimConfig(dgp="dgp1", n=500, n_i=500, delta=2.0, reps=500, B=500,
                                level=0.05, seed=SEED))
    s = rep.estimators["frechet"]
    ok = abs(100 * s.coverage - 92.56) <= 3.0 and s.failures == 0
    record("C4b coverage n=500 within 92.56 +/- 3", ok,
           f"coverage={100 * s.coverage:.1f}% (se {100 * s.coverage_se:.1f}) reps={s.reps_ok}")
    assert ok


# ------------------------------------------------------------ C5, C6 tests

@pytest.mark.slow
def test_c5_nullity_power():
    rep = monte_carlo(SimConfig(dgp="dgp1", n=1000, n_i=500, delta="d05", reps=250, B=500,
                                level=0.05, seed=SEED))
    s = rep.estimators["frechet"]
    reject = 1.0 - s.accept_nullity
    ok = reject >= 0.95
    record("C5a nullity rejection (d=0.5, n=1000) >= 95%", ok,
           f"rejection={100 * reject:.1f}% reps={s.reps_ok}")
    assert ok


@pytest.mark.slow
def test_c5_homogeneity_power():
    rep = monte_carlo(SimConfig(dgp="dgp2", n=1000, n_i=500, delta=0.0, delta_lambda=0.5,
                                reps=250, B=500, level=0.05, seed=SEED))
    s = rep.estimators["frechet"]
    reject = 1.0 - s.accept_homogeneity
    ok = reject >= 0.95
    record("C5b homogeneity rejection (DGP2, n=1000) >= 95%", ok,
           f"rejection={100 * reject:.1f}% reps={s.reps_ok}")
    assert ok


@pytest.mark.slow
def test_c6_size():
    rep = monte_carlo(SimConfig(dgp="dgp1", n=1000, n_i=500, delta=0.0, reps=500, B=500,
                                level=0.05, seed=SEED))
    s = rep.estimators["frechet"]
    reject = 1.0 - s.accept_nullity
    ok = 0.02 <= reject <= 0.10
    record("C6 nullity size at delta=0 in [2%, 10%]", ok,
           f"rejection={100 * reject:.1f}% reps={s.reps_ok}")
    assert ok


# ---------------------------------------------------------- C7 arithmetic

def test_c7_bandwidth_arithmetic():
    kernel, s = KernelSpec.TRIANGULAR, 1
    m = 9
    # first-stage fit whose aggregate bias and variance constants are both 1
    deriv = {Side.PLUS: np.full(m, 1.0 / bias_factor(kernel, s, Side.PLUS)),
             Side.MINUS: np.zeros(m)}
    sigma2 = {Side.PLUS: np.full(m, 1.0 / variance_factor(kernel, s, Side.PLUS)),
              Side.MINUS: np.zeros(m)}
    fit = FirstStageFit(s, deriv, sigma2, {sd: np.zeros((m, 2)) for sd in Side})
    h_mse = mse_bandwidth(fit, 1000, kernel, f0=1.0)[0]
    h_imse = imse_bandwidth(fit, QuantileGrid.deciles(), 1000, kernel, f0=1.0)[0]
    rot = rot_adjust(1.0, 1, 1000)
    ok = (np.all(np.abs(h_mse - 0.19037) <= 1e-4) and abs(h_imse - 0.19037) <= 1e-4
          and abs(rot - 0.70795) <= 1e-4)
    record("C7 bandwidth arithmetic", ok,
           f"mse={h_mse[0]:.5f} imse={h_imse:.5f} rot factor={rot:.5f}")
    assert ok


# ---------------------------------------------------------- C8 performance

def _end_to_end_seconds(n, repeats=3):
    grid = QuantileGrid.uniform(20, 0.05, 0.95)
    x, _, draws = dgp1_arrays(n, 500, 2.0, np.random.default_rng(SEED))
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        qmat = _batched_qf(draws, grid.points)
        fit_arrays(x, qmat, grid, B=200, seed=SEED)
        best = min(best, time.perf_counter() - t0)
    return best


def test_c8_performance():
    t_small = _end_to_end_seconds(2000)
    t_large = _end_to_end_seconds(20000)
    ratio = t_large / t_small
    ok = t_small < 5.0 and 5.0 <= ratio <= 20.0
    record("C8 runtime n=2000 < 5s, 10x scaling in [5,20]", ok,
           f"n=2000: {t_small:.3f}s  n=20000: {t_large:.3f}s  ratio={ratio:.2f}")
    assert ok
