import numpy as np
import pytest

from core.birkhoff import (
    BirkhoffNormalForm, Polynomial, amplitudes_for, birkhoff_transform, gbar_matrix,
    modulated_frequencies, rescale_hamiltonian, small_divisor,
)
from core.errors import ExcludedPatternError, ParameterError
from core.nlw_model import NLWConfig, NLWModel


def _normal_form(tangential=(1,), Kmax=3, space_cutoff=6, f_coeffs=(1.0,)):
    cfg = NLWConfig(m=1.0, tangential_set=tangential, space_cutoff=space_cutoff, f_coeffs=f_coeffs)
    return BirkhoffNormalForm(NLWModel(cfg, Kmax))


def test_gbar_printed_values():
    assert gbar_matrix((1,), 1.0)[0, 0] == pytest.approx(9 / (2 * np.pi), abs=1e-12)
    g = gbar_matrix((1, 2), 1.0)
    assert g[0, 1] == pytest.approx(12 / (np.pi * np.sqrt(10)), abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(5):
        indices = tuple(rng.choice(np.arange(1, 9), size=3, replace=False))
        g = gbar_matrix(indices, 1.3)
        np.testing.assert_array_equal(g, g.T)
        assert np.all(g > 0)


def test_small_divisor_cases():
    assert small_divisor((1, 1, 1, 3), (1, 1, 1, -1), 1.0) == pytest.approx(
        3 * np.sqrt(2) - np.sqrt(10), abs=1e-12)
    assert small_divisor((1, 1, 1, 3), (-1, -1, -1, 1), 1.0) == pytest.approx(
        -small_divisor((1, 1, 1, 3), (1, 1, 1, -1), 1.0))
    with pytest.raises(ExcludedPatternError):
        small_divisor((1, 1, 2, 2), (1, -1, 1, -1), 1.0)


def test_polynomial_compose_truncates():
    x = Polynomial.variable(2, 0)
    y = Polynomial.variable(2, 1)
    square = x * x
    composed = square.compose([x + y * y, y], 3)
    assert composed.coefficient((2, 0)) == 1.0
    assert composed.coefficient((1, 2)) == 2.0
    assert composed.coefficient((0, 4)) == 0.0


def test_single_mode_normal_form():
    nf = _normal_form()
    quartic = nf.transformed_quartic
    assert nf.nonresonant_residual() <= 1e-12
    assert quartic.coefficient((2, 2)).real == pytest.approx(9 / (4 * np.pi), abs=1e-12)
    assert nf.gbar_from_transform()[0, 0] == pytest.approx(9 / (2 * np.pi), abs=1e-12)


def test_two_mode_normal_form_defects():
    for tangential in [(1, 2), (1, 3)]:
        data = birkhoff_transform(_normal_form(tangential).model)
        assert data.nonresonant_residual <= 1e-12
        assert data.resonant_defect <= 1e-12
        assert data.symplectic_defect <= 1e-10
        assert data.min_divisor > 0


def test_all_resonant_input_is_identity():
    nf = _normal_form()
    quartic = nf.quartic
    nf.__dict__["quartic"] = Polynomial(2, {e: c for e, c in quartic.terms.items() if e == (2, 2)})
    assert nf.generator.terms == {}
    assert [p.terms for p in nf.flow] == [{(1, 0): 1.0}, {(0, 1): 1.0}]


def test_modulated_frequencies():
    np.testing.assert_allclose(modulated_frequencies([0.0], (1,), 1.0), [np.sqrt(2)])
    assert modulated_frequencies([0.1], (1,), 1.0)[0] == pytest.approx(1.428556, abs=1e-6)
    base = modulated_frequencies([0.1, 0.2], (1, 2), 1.0)
    for j in range(2):
        bumped = np.array([0.1, 0.2])
        bumped[j] += 0.01
        assert np.all(modulated_frequencies(bumped, (1, 2), 1.0) > base)
    np.testing.assert_allclose(amplitudes_for(base, (1, 2), 1.0), [0.1, 0.2], rtol=1e-10)


def _sample_points(ham, P=7, seed=0):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 2 * np.pi, size=(P, ham.d))
    action = 0.1 * rng.normal(size=(P, ham.d))
    x = 0.1 * rng.normal(size=(P, ham.model.normal_columns.size))
    return theta, action, x


def test_rescaling_identity_and_errors():
    nf = _normal_form()
    ham = rescale_hamiltonian(1.0, nf)
    assert ham.delta == 1.0
    np.testing.assert_allclose(ham.twist, ham.gbar)
    with pytest.raises(ParameterError):
        rescale_hamiltonian(0.0, nf)


def test_rescaling_twist_and_leading_size():
    nf = _normal_form()
    delta = 1e-2
    ham = rescale_hamiltonian(delta, nf)
    np.testing.assert_allclose(ham.twist, delta ** 4 * ham.gbar)
    half = rescale_hamiltonian(delta / 2, nf)
    theta = np.linspace(0, 2 * np.pi, 9)[:, None]
    zero_action = np.zeros((9, 1))
    zero_x = np.zeros((9, ham.model.normal_columns.size))
    big = np.max(np.abs(ham.evaluate(theta, zero_action, zero_x).d_x))
    small = np.max(np.abs(half.evaluate(theta, zero_action, zero_x).d_x))
    assert big / small == pytest.approx(2.0, rel=1e-3)


def test_gradients_match_finite_differences():
    nf = _normal_form()
    ham = rescale_hamiltonian(0.3, nf)
    theta, action, x = _sample_points(ham)
    values = ham.evaluate(theta, action, x)
    h = 1e-6
    e = np.zeros_like(theta)
    e[:, 0] = h
    fd_theta = (ham.evaluate(theta + e, action, x).U - ham.evaluate(theta - e, action, x).U) / (2 * h)
    fd_action = (ham.evaluate(theta, action + e, x).U - ham.evaluate(theta, action - e, x).U) / (2 * h)
    np.testing.assert_allclose(values.d_theta[:, 0], fd_theta, atol=1e-6)
    np.testing.assert_allclose(values.d_action[:, 0], fd_action, atol=1e-6)
    ex = np.zeros_like(x)
    ex[:, 2] = h
    fd_x = (ham.evaluate(theta, action, x + ex).U - ham.evaluate(theta, action, x - ex).U) / (2 * h)
    np.testing.assert_allclose(values.d_x[:, 2], fd_x, atol=1e-6)


def test_x_derivatives_first_entry_matches_gradient():
    ham = rescale_hamiltonian(0.2, _normal_form())
    theta, action, x = _sample_points(ham)
    first = ham.x_derivatives(theta, action, 2)
    np.testing.assert_allclose(first[0], ham.evaluate(theta, action, np.zeros_like(x)).d_x, atol=1e-13)
    np.testing.assert_allclose(first[1], np.swapaxes(first[1], 1, 2), atol=1e-13)
