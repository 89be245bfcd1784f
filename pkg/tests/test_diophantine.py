import numpy as np
import pytest

from core.clusters import root_level
from core.diophantine import (
    DiophantineParams, MeasureRow, condition_hulls, default_nu, distance_to_union, measure_estimate,
    measure_slope, merge_intervals, omega_n_member, omega_star_member, sigma_star_member,
    static_history, static_level,
)
from core.errors import ParameterError
from core.mode_space import Truncation

GOLDEN = 0.5 * (1.0 + np.sqrt(5.0))


def test_default_nu_and_exponent_check():
    assert default_nu(1) == 5.0
    assert default_nu(2, xi=0.5) == 8.0
    assert DiophantineParams(K=1.0).exponent(1) == 5.0
    with pytest.raises(ParameterError):
        DiophantineParams(K=1.0, nu=2.0).exponent(1)
    with pytest.raises(ValueError):
        DiophantineParams(K=1.0, box=[(2.0, 1.0)])


def test_interval_helpers():
    assert merge_intervals([(0.5, 2.0), (0.0, 1.0), (3.0, 4.0)]) == [(0.0, 2.0), (3.0, 4.0)]
    hulls = condition_hulls([(1.0, 1.1)])
    np.testing.assert_allclose(hulls, [(0.0, 0.1), (1.0, 1.1), (2.0, 2.2)], atol=1e-15)
    distances = distance_to_union(np.array([0.5, 2.0, 2.9, 5.0, -1.0]), [(0.0, 1.0), (3.0, 4.0)])
    np.testing.assert_allclose(distances, [0.0, 1.0, 0.1, 1.0, 1.0], atol=1e-15)


def test_level_conditions_small_range_is_empty():
    level = static_level([1.0, 2.0], 0.5, 1)
    report = omega_n_member([1.0], level, DiophantineParams(K=0.1, nu=3.0))
    assert report.member
    assert not report.cap_limited


def test_level_conditions_exclude_resonant_omega():
    level = static_level([1.0, 2.0], 0.5, 1)
    report = omega_n_member([1.0], level, DiophantineParams(K=10.0, nu=3.0))
    assert not report.member
    assert report.level == 1
    assert report.witness["q"] == [1]
    assert report.witness["distance"] == 0.0

    capped = omega_n_member([1.0], level, DiophantineParams(K=100.0, nu=3.0, cap=4))
    assert capped.cap_limited


def test_resonance_is_seen_once_the_level_range_reaches_it():
    history = [static_level([1.0, np.sqrt(2.0)], 0.1, n) for n in range(1, 7)]
    near = [np.sqrt(2.0) + 1e-4]
    # K eta^(-n/nu) stays below 1 for K = 1e-3: every level passes
    assert omega_star_member(near, history, DiophantineParams(K=1e-3, nu=2.5, eta=0.1)).member
    # with K = 0.05 the range first holds |q|_1 = 1 at level 4
    params = DiophantineParams(K=0.05, nu=2.5, eta=0.1)
    report = omega_star_member(near, history, params)
    assert not report.member
    assert report.level == 4
    assert report.witness["q"] == [1]
    assert omega_star_member([1.2], history, params).member


def test_star_membership_reports_first_failing_level():
    trunc = Truncation(d=1, Q=2, Kmax=1, mults=(1, 1))
    root = root_level(trunc, 0.5, np.array([1.0, 2.0]))
    history = [root, static_level([1.0, 2.0], 0.5, 1), static_level([1.0, 2.0], 0.5, 2)]
    report = omega_star_member([1.0], history, DiophantineParams(K=10.0, nu=3.0))
    assert not report.member
    assert report.level == 1
    assert omega_star_member([1.0], history, DiophantineParams(K=0.1, nu=3.0)).member


def test_dyadic_shell_condition():
    resonant = sigma_star_member([1.0], static_level([1.0, 2.0], 0.5, 1),
                                 DiophantineParams(K=0.01, nu=3.0, cap=8))
    assert not resonant.member
    assert resonant.witness["shell"] == 1
    golden = sigma_star_member([GOLDEN], static_level([1.0], 0.5, 1),
                               DiophantineParams(K=0.01, nu=3.0, cap=8))
    assert golden.member


MEASURE_BLOCKS = {0: np.array([0]), 1: np.array([1, 2])}
MEASURE_SPECTRUM = [1.0, np.sqrt(2.0), np.sqrt(2.0) + 0.3]


def _measure_setup(levels=3):
    params = DiophantineParams(K=0.0, nu=2.5, eta=0.01, max_level=levels, box=[(1.0, 2.0)], cap=16)
    return params, static_history(MEASURE_SPECTRUM, MEASURE_BLOCKS, 0.01, levels)


def test_static_history_splits_each_mode_block():
    history = static_history(MEASURE_SPECTRUM, MEASURE_BLOCKS, 0.5, 2)
    assert [level.n for level in history] == [1, 2]
    assert {c.key[0] for c in history[0].clusters} == {0, 1}
    assert {c.key[0] for c in static_level(MEASURE_SPECTRUM, 0.5, 1).clusters} == {0}


def test_measure_estimate_is_monotone_and_reproducible():
    params, history = _measure_setup()
    grid = [0.1, 0.01, 1e-3, 0.0]
    rows = measure_estimate(params, history, 500, 7, grid)
    fractions = [r.excluded_fraction for r in rows]
    assert fractions == sorted(fractions, reverse=True)
    assert fractions[0] > 0.0
    assert fractions[-1] == 0.0
    for row in rows:
        assert row.ci_low <= row.excluded_fraction <= row.ci_high
        assert row.samples == 500
    again = measure_estimate(params, history, 500, 7, grid)
    assert [r.model_dump() for r in again] == [r.model_dump() for r in rows]


def test_measure_excludes_exactly_the_points_failing_star_membership():
    params, history = _measure_setup()
    samples, seed = 200, 11
    points = 1.0 + np.random.Generator(np.random.Philox(seed)).random((samples, 1))
    for K in (0.05, 0.005):
        row = measure_estimate(params, history, samples, seed, [K])[0]
        at_K = params.model_copy(update={"K": K})
        failing = sum(not omega_star_member(p, history, at_K).member for p in points)
        assert row.excluded_fraction == failing / samples


def test_measure_skips_levels_with_empty_range():
    # K eta^(-n/nu) < 1 at every level, so no q is tested
    params, history = _measure_setup()
    params = params.model_copy(update={"eta": 0.5})
    row = measure_estimate(params, history, 300, 0, [0.3])[0]
    assert row.excluded_fraction == 0.0
    assert row.cap_limited_count == 0


def test_measure_flags_cap_limited_exclusions():
    params, history = _measure_setup(levels=1)
    params = params.model_copy(update={"cap": 2})
    row = measure_estimate(params, history, 200, 1, [10.0])[0]
    assert row.excluded_fraction == 1.0
    assert row.cap_limited_count == 200


def test_measure_needs_box():
    with pytest.raises(ParameterError):
        measure_estimate(DiophantineParams(K=0.0), [static_level([1.0], 0.5, 1)], 10, 0, [0.1])


def test_measure_slope():
    rows = [MeasureRow(K=K, excluded_fraction=2.0 * K, ci_low=0.0, ci_high=1.0, samples=100,
                       cap_limited_count=0) for K in (0.1, 0.01, 1e-3)]
    assert measure_slope(rows) == pytest.approx(1.0)
    assert measure_slope(rows[:1]) is None
