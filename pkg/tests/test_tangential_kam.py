import numpy as np
import pytest

from core.birkhoff import PerturbationValues, rescale_hamiltonian, BirkhoffNormalForm
from core.diophantine import DiophantineParams
from core.errors import ContractionError, InadmissibleFrequencyError
from core.jets import JetFunctional
from core.mode_space import FourierMap, TangentialMap, Truncation
from core.nlw_model import NLWConfig, NLWModel
from core.tangential_kam import (
    TangentialProblem, contraction_rate, coupled_residual, coupled_solve, first_order_tangential,
    solve_tangential, translate_solution,
)

GOLDEN = 0.5 * (1.0 + np.sqrt(5.0))


class _Pendulum:
    """U = eps (sum cos theta + |I|^2 / 2), independent of x."""

    def __init__(self, omega, eps=1e-3, lam=1.0):
        self.omega = np.asarray(omega, dtype=float)
        self.twist = np.eye(len(self.omega))
        self.lam = lam
        self.eps = eps

    def coupling(self, lam):
        return lam

    def evaluate(self, theta, action, x):
        U = self.eps * (np.sum(np.cos(theta), axis=1) + 0.5 * np.sum(action ** 2, axis=1))
        return PerturbationValues(U, -self.eps * np.sin(theta), self.eps * action, np.zeros_like(x))


class _StiffTwist:
    """Twist 1e-8 with a constant mean action force; both gradients carry random noise."""

    def __init__(self, omega, scale=1e-8, noise=1e-16, theta_noise=0.0, seed=0):
        self.omega = np.asarray(omega, dtype=float)
        self.twist = scale * np.eye(len(self.omega))
        self.lam = 1.0
        self.noise = noise
        self.theta_noise = theta_noise
        self.rng = np.random.default_rng(seed)

    def coupling(self, lam):
        return lam

    def evaluate(self, theta, action, x):
        d_action = 1e-9 + self.noise * self.rng.normal(size=action.shape)
        d_theta = -1e-3 * np.sin(theta) + self.theta_noise * self.rng.normal(size=theta.shape)
        return PerturbationValues(np.zeros(len(theta)), d_theta, d_action, np.zeros_like(x))


def _trunc(d=2, Q=2):
    return Truncation(d=d, Q=Q, Kmax=1, mults=(1, 1))


def _symmetric(trunc, seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(trunc.n_q, trunc.d)) + 1j * rng.normal(size=(trunc.n_q, trunc.d))
    return 0.5 * (raw + np.conj(raw[::-1]))


def test_block_inverse_solves_mode_equations():
    trunc = _trunc()
    problem = TangentialProblem(_Pendulum([1.0, GOLDEN]), trunc)
    d_theta, d_action = _symmetric(trunc, 0), _symmetric(trunc, 1)
    y = problem.apply_block_inverse(d_theta, d_action)
    D = -1j * problem.kappa[:, None]
    centre = trunc.zero_index
    rest = np.arange(trunc.n_q) != centre
    np.testing.assert_allclose((D * y.j + d_theta)[rest], 0.0, atol=1e-12)
    np.testing.assert_allclose((-D * y.phi + y.j @ problem.g.T + d_action)[rest], 0.0, atol=1e-12)
    np.testing.assert_allclose(y.j[centre], -np.linalg.solve(problem.g, d_action[centre]), atol=1e-14)
    np.testing.assert_allclose(y.phi[centre], 0.0)
    assert np.isfinite(problem.block_inverse_norm())


def test_chord_iteration_converges_with_zero_average():
    trunc = _trunc()
    problem = TangentialProblem(_Pendulum([1.0, GOLDEN]), trunc)
    result = solve_tangential(problem, FourierMap.zeros(trunc))
    assert result.iterations >= 1
    assert result.residual <= 1e-10
    assert result.average_defect <= 1e-10
    np.testing.assert_allclose(result.y.j[trunc.zero_index], 0.0, atol=1e-14)


def test_step_norm_measures_mean_action_through_twist():
    trunc = _trunc()
    problem = TangentialProblem(_StiffTwist([1.0, GOLDEN]), trunc)
    j = np.zeros((trunc.n_q, trunc.d), dtype=complex)
    j[trunc.zero_index] = [3.0, 4.0]
    assert problem.step_norm(TangentialMap(trunc, None, j)) == pytest.approx(5e-8)
    phi = _symmetric(trunc, 2)
    assert problem.step_norm(TangentialMap(trunc, phi)) == pytest.approx(TangentialMap(trunc, phi).norm())


def test_stiff_twist_converges_despite_noisy_mean_action():
    trunc = _trunc()
    problem = TangentialProblem(_StiffTwist([1.0, GOLDEN]), trunc)
    result = solve_tangential(problem, FourierMap.zeros(trunc))
    np.testing.assert_allclose(result.y.j[trunc.zero_index], -0.1, rtol=1e-6)
    assert result.residual <= 1e-12
    assert len(result.steps) == result.iterations


def test_stalled_iteration_is_accepted_at_the_noise_floor():
    trunc = _trunc()
    problem = TangentialProblem(_StiffTwist([1.0, GOLDEN], theta_noise=1e-10), trunc)
    result = solve_tangential(problem, FourierMap.zeros(trunc))
    assert result.steps[-1] <= 1e-8
    assert result.steps[-1] >= 0.5 * result.steps[-2]
    assert result.residual <= 1e-8

    noisy = TangentialProblem(_StiffTwist([1.0, GOLDEN], theta_noise=1e-4), trunc)
    with pytest.raises(ContractionError):
        solve_tangential(noisy, FourierMap.zeros(trunc))


def test_chord_iteration_contracts_linearly():
    trunc = _trunc()
    result = solve_tangential(TangentialProblem(_Pendulum([1.0, GOLDEN]), trunc), FourierMap.zeros(trunc))
    assert result.iterations >= 3
    rate = contraction_rate(result.steps)
    assert 0.0 < rate < 0.1


def test_solution_is_linear_in_small_coupling():
    trunc = _trunc()
    lam = 1e-6
    problem = TangentialProblem(_Pendulum([1.0, GOLDEN], eps=1.0), trunc, lam=lam)
    y = solve_tangential(problem, FourierMap.zeros(trunc)).y
    slope = first_order_tangential(problem)
    assert problem.lam == lam
    gap = (y - TangentialMap(trunc, lam * slope.phi, lam * slope.j)).norm()
    assert gap <= 1e-3 * lam * slope.norm()


def test_translation_maps_solutions_to_solutions():
    trunc = _trunc()
    problem = TangentialProblem(_Pendulum([1.0, GOLDEN]), trunc)
    z = FourierMap.zeros(trunc)
    y = solve_tangential(problem, z).y
    beta = [0.3, -1.1]
    moved, moved_z = translate_solution(y, z, beta)
    residual, _ = problem.residual(moved, moved_z)
    assert residual <= 1e-10
    back, _ = translate_solution(moved, moved_z, [-b for b in beta])
    assert (back - y).norm() <= 1e-13


def test_rational_frequencies_are_rejected():
    with pytest.raises(InadmissibleFrequencyError) as info:
        TangentialProblem(_Pendulum([1.0, 1.0]), _trunc())
    assert sum(info.value.witness["q"]) == 0
    with pytest.raises(InadmissibleFrequencyError):
        TangentialProblem(_Pendulum([1.0, GOLDEN]), _trunc(), dioph=DiophantineParams(K=1.0, nu=4.0))


def test_zero_coupling_on_the_wave_equation():
    cfg = NLWConfig(m=1.0, tangential_set=(1,), space_cutoff=4)
    model = NLWModel(cfg, 2)
    ham = rescale_hamiltonian(1e-2, BirkhoffNormalForm(model))
    problem = TangentialProblem(ham, model.truncation(2), lam=0.0)
    result = solve_tangential(problem, FourierMap.zeros(problem.trunc))
    assert result.iterations == 0
    assert result.y.norm() == 0.0


def _wave_problem(a=1e-2, lam=None):
    cfg = NLWConfig(m=1.0, tangential_set=(1,), space_cutoff=4)
    model = NLWModel(cfg, 1)
    ham = rescale_hamiltonian(a, BirkhoffNormalForm(model), lam=lam)
    return TangentialProblem(ham, model.truncation(2))


def test_tangential_solve_on_the_wave_equation():
    problem = _wave_problem()
    assert problem.lam == pytest.approx(1e-2)
    assert np.max(np.abs(problem.g)) < 1e-6
    result = solve_tangential(problem, FourierMap.zeros(problem.trunc))
    assert result.iterations < 100
    assert result.residual <= 1e-10
    assert np.all(np.isfinite(result.y.j))
    again = solve_tangential(problem, FourierMap.zeros(problem.trunc), start=result.y)
    assert problem.step_norm(again.y - result.y) <= 1e-8


def test_coupled_solve_with_decoupled_normal_part():
    trunc = _trunc()
    problem = TangentialProblem(_Pendulum([1.0, GOLDEN]), trunc)
    calls = []

    def normal_solver(y):
        calls.append(y)
        return FourierMap.zeros(trunc), JetFunctional.zeros(trunc, 1)

    result = coupled_solve(problem, normal_solver, mu=[1.0, 1.5])
    assert len(calls) == result.iterations + 1
    assert result.residual <= 1e-10
    assert result.steps[-1] <= result.steps[0]


def test_coupled_residual_belongs_to_the_reported_triple():
    trunc = _trunc()
    problem = TangentialProblem(_Pendulum([1.0, GOLDEN]), trunc)
    mu = [1.0, 1.5]
    calls = []

    def normal_solver(y):
        calls.append(y)
        c = np.full(trunc.size, 1e-3 * (1.0 + float(np.sum(np.abs(y.j)))), dtype=complex)
        w0 = JetFunctional(trunc, 1, c, np.zeros((trunc.size, trunc.size), dtype=complex))
        return FourierMap.from_flat(trunc, 0.5 * c, real=False), w0

    result = coupled_solve(problem, normal_solver, mu=mu)
    assert calls[-1] is result.y
    assert result.residual == coupled_residual(problem, result.y, result.z, result.w0, mu)
    assert result.residual > 0.0


def test_contraction_rate():
    assert contraction_rate([1.0, 0.1, 0.01]) == pytest.approx(0.1)
    assert contraction_rate([1.0]) is None
