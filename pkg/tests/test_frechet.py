import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from r3d.data import QuantileCurve, QuantileGrid
from r3d.errors import ValidationError
from r3d.frechet import pava, project_qf, project_rows, rearrange


def brute_isotonic(v, w=None):
    """Exact monotone projection by enumerating all partitions into consecutive blocks.

    The optimum is piecewise constant with block values equal to block
    (weighted) means; among candidates with nondecreasing block means the
    cheapest one is the projection. Arithmetic is exact (rationals), so
    near-ties cannot be misranked by rounding.
    """
    v = [Fraction(float(x)) for x in v]
    m = len(v)
    w = [Fraction(1)] * m if w is None else [Fraction(float(x)) for x in w]
    best, best_cost = None, None
    for cuts in itertools.product([0, 1], repeat=m - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [m]
        u = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            mean = sum(wi * vi for wi, vi in zip(w[a:b], v[a:b])) / sum(w[a:b])
            u.extend([mean] * (b - a))
        if all(u[j] <= u[j + 1] for j in range(m - 1)):
            cost = sum(wi * (ui - vi) ** 2 for wi, ui, vi in zip(w, u, v))
            if best_cost is None or cost < best_cost:
                best, best_cost = u, cost
    return np.array([float(x) for x in best])


def grid_curve(vals):
    m = len(vals)
    return QuantileCurve(QuantileGrid(np.arange(1, m + 1) / (m + 1)), np.asarray(vals, float))


def test_monotone_input_unchanged():
    np.testing.assert_array_equal(project_qf(grid_curve([1, 2, 3])).values, [1, 2, 3])


def test_two_point_pool():
    np.testing.assert_allclose(project_qf(grid_curve([2, 1])).values, [1.5, 1.5])


def test_three_point_pool():
    np.testing.assert_allclose(project_qf(grid_curve([3, 1, 2])).values, [2, 2, 2])
    np.testing.assert_allclose(brute_isotonic([3, 1, 2]), [2, 2, 2])


def test_projection_flagged_monotone():
    assert project_qf(grid_curve([3, 1, 2])).monotone_flag


def test_weighted_pool():
    np.testing.assert_allclose(pava([2.0, 1.0], [3.0, 1.0]), [1.75, 1.75])


@pytest.mark.parametrize("bad", [[np.nan, 1.0], [np.inf, 0.0]])
def test_nonfinite_rejected(bad):
    with pytest.raises(ValidationError):
        pava(bad)


def test_weights_must_be_positive():
    with pytest.raises(ValidationError):
        pava([2.0, 1.0], [1.0, 0.0])


def test_lattice_exhaustive_small():
    # every vector in {0,1,2}^M for M <= 5
    for m in range(1, 6):
        for v in itertools.product(range(3), repeat=m):
            np.testing.assert_allclose(pava(v), brute_isotonic(v), atol=1e-12)


vec = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=6)


@settings(max_examples=300, deadline=None)
@given(vec, st.data())
def test_weighted_matches_brute_force(v, data):
    w = data.draw(st.lists(st.floats(0.1, 10), min_size=len(v), max_size=len(v)))
    np.testing.assert_allclose(pava(v, w), brute_isotonic(v, w), atol=1e-9)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=40))
def test_idempotent_monotone_and_mean_preserving(v):
    u = pava(v)
    assert np.all(np.diff(u) >= 0)
    np.testing.assert_array_equal(pava(u), u)
    assert u.mean() == pytest.approx(np.mean(v), abs=1e-9 * (1 + np.abs(v).max()))


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_non_expansive(m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=m) * 5, rng.normal(size=m) * 5
    assert np.linalg.norm(pava(a) - pava(b)) <= np.linalg.norm(a - b) + 1e-12


def test_single_adjacent_swap_agrees_with_rearrangement():
    v = np.array([1.0, 2.0, 4.0, 3.0, 5.0])
    # pooling the swapped pair equals the mean; rearrangement keeps the values sorted
    np.testing.assert_allclose(pava(v), [1, 2, 3.5, 3.5, 5])
    np.testing.assert_array_equal(rearrange(grid_curve(v)).values, [1, 2, 3, 4, 5])
    # both restore monotonicity with equal mean
    assert pava(v).mean() == pytest.approx(rearrange(grid_curve(v)).values.mean())


def test_rearrange_examples():
    np.testing.assert_array_equal(rearrange(grid_curve([3, 1, 2])).values, [1, 2, 3])
    np.testing.assert_array_equal(rearrange(grid_curve([1, 2, 3])).values, [1, 2, 3])
    np.testing.assert_array_equal(rearrange(grid_curve([2, 2, 1])).values, [1, 2, 2])


def test_project_rows():
    mat = np.array([[1.0, 2.0, 3.0], [3.0, 1.0, 2.0]])
    out = project_rows(mat)
    np.testing.assert_array_equal(out[0], [1, 2, 3])
    np.testing.assert_allclose(out[1], [2, 2, 2])
    np.testing.assert_array_equal(mat[1], [3, 1, 2])
