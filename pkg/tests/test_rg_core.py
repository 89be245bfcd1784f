import numpy as np
import pytest

from core.clusters import cluster_decompose, resonant_sets, root_level
from core.errors import ContractionError, SmallDivisorError
from core.jets import JetFunctional
from core.mode_space import DiagonalKernel, FourierMap, KernelTag, Truncation, flat_weighted_norm
from core.rg_core import (
    RGParams, compose_jets, extract_A, fit_gamma_exponent, gamma_operator, gamma_symbol,
    identity_jet, run_rg, solve_R,
)
from core.verification import lindstedt_expand, lindstedt_sum, residual_fp

# Nonresonant toy: |0.37 q| stays away from both normal frequencies for |q| <= 2
OMEGA = np.array([0.37])
MU = np.array([1.0, 1.5])


def _trunc(Q=2):
    return Truncation(d=1, Q=Q, Kmax=1, mults=(1, 1))


def _random_jet(trunc, order=2, scale=1.0, seed=0):
    rng = np.random.default_rng(seed)
    n = trunc.size

    def draw(*shape):
        return scale * (rng.uniform(-1, 1, shape) + 1j * rng.uniform(-1, 1, shape)) / n

    B = draw(n, n, n)
    B = 0.5 * (B + B.transpose(0, 2, 1))
    return JetFunctional(trunc, order, draw(n), draw(n, n), B)


def test_compose_with_identity_is_noop():
    trunc = _trunc(1)
    jet = _random_jet(trunc)
    composed = compose_jets(jet, identity_jet(trunc, 2))
    np.testing.assert_allclose(composed.c, jet.c)
    np.testing.assert_allclose(composed.L, jet.L)
    np.testing.assert_allclose(composed.B, jet.B)


def test_compose_matches_direct_evaluation_to_second_order():
    trunc = _trunc(1)
    outer = _random_jet(trunc, seed=1)
    inner = _random_jet(trunc, seed=2)
    composed = compose_jets(outer, inner)
    np.testing.assert_allclose(composed.c, outer(inner.c), atol=1e-15)
    np.testing.assert_allclose(composed.L, outer.derivative(inner.c) @ inner.L, atol=1e-15)

    direction = np.random.default_rng(3).normal(size=trunc.size)

    def error(eps):
        z = eps * direction
        return np.max(np.abs(outer(inner(z)) - composed(z)))

    ratio = error(1e-3) / error(5e-4)
    assert 6.0 < ratio < 10.0


def test_gamma_inverts_free_kernel():
    trunc = _trunc()
    k0 = DiagonalKernel.free(trunc, OMEGA, MU)
    identity = DiagonalKernel.identity(trunc)
    gamma = gamma_operator(k0, identity, identity, 1)
    products = gamma.blocks @ k0.blocks
    np.testing.assert_allclose(products, np.broadcast_to(np.eye(2), products.shape), atol=1e-14)

    zero = gamma_operator(k0, DiagonalKernel.zeros(trunc, KernelTag.PROJECTOR), identity, 1)
    assert not np.any(zero.blocks)


def test_gamma_rejects_singular_block():
    trunc = _trunc()
    k0 = DiagonalKernel.free(trunc, np.array([1.0]), MU)
    identity = DiagonalKernel.identity(trunc)
    with pytest.raises(SmallDivisorError) as info:
        gamma_operator(k0, identity, identity, 1)
    assert abs(info.value.witness["q"][0]) == 1


def test_gamma_ignores_resonance_outside_projected_slots():
    # mode 0 (mu = 1) is resonant at q = -1 but Q drops it; mode 1 carries two slots
    trunc = Truncation(d=1, Q=1, Kmax=1, mults=(1, 2))
    mu = np.array([1.0, np.sqrt(2.0), np.sqrt(2.0)])
    k0 = DiagonalKernel.free(trunc, np.array([1.0]), mu)
    keep = np.diag([0.0, 1.0, 1.0])
    q_block = DiagonalKernel(trunc, np.broadcast_to(keep, (trunc.n_q, 3, 3)), KernelTag.PROJECTOR)
    gamma = gamma_operator(k0, q_block, DiagonalKernel.identity(trunc), 1)

    row = int(np.flatnonzero(trunc.q_grid[:, 0] == -1)[0])
    np.testing.assert_allclose(gamma.blocks[row], np.diag([0.0, -1.0, -1.0]), atol=1e-14)
    assert np.all(np.isfinite(gamma.blocks))
    np.testing.assert_allclose(k0.blocks @ gamma.blocks, q_block.blocks, atol=1e-14)


def test_solve_R_affine_jet():
    trunc = _trunc()
    identity = DiagonalKernel.identity(trunc)
    gamma = gamma_operator(DiagonalKernel.free(trunc, OMEGA, MU), identity, identity)
    jet = _random_jet(trunc, order=1, scale=0.1)
    solution = solve_R(jet, gamma)
    G = gamma.as_matrix()
    H = np.linalg.inv(np.eye(trunc.size) - G @ jet.L)
    np.testing.assert_allclose(solution.change.c, H @ G @ jet.c, atol=1e-14)
    np.testing.assert_allclose(solution.change.L, H, atol=1e-12)
    assert solution.contraction < 0.5


def test_solve_R_refuses_expanding_map():
    trunc = _trunc()
    identity = DiagonalKernel.identity(trunc)
    gamma = gamma_operator(DiagonalKernel.free(trunc, OMEGA, MU), identity, identity)
    jet = JetFunctional(trunc, 1, np.zeros(trunc.size), 10.0 * np.eye(trunc.size))
    with pytest.raises(ContractionError):
        solve_R(jet, gamma)


def test_zero_map_gives_zero_torus_in_one_level():
    trunc = _trunc()
    state = run_rg(trunc, OMEGA, MU, JetFunctional.zeros(trunc, 2), RGParams(max_levels=4))
    assert state.n == 1
    assert not np.any(state.z.coeffs)
    diag = state.diagnostics[0]
    assert diag.residual == 0.0
    assert diag.identity_residual == 0.0
    for k, values in state.mu_tilde().items():
        np.testing.assert_allclose(values, MU[trunc.slots_of(k)])


def test_nonresonant_run_solves_and_matches_lindstedt():
    trunc = _trunc()
    lam = 1e-4
    w_hat = _random_jet(trunc, seed=4)
    w0 = w_hat.scaled(lam)
    state = run_rg(trunc, OMEGA, MU, w0, RGParams(max_levels=3))
    z = state.z
    s = 2.0
    assert residual_fp(z, OMEGA, MU, w0, s) <= 1e-15
    for diag in state.diagnostics:
        assert diag.identity_residual <= 1e-10 * max(diag.identity_scale, 1e-300)
        assert diag.contraction < 0.5
    assert state.diagnostics[-1].z_step == 0.0

    series = lindstedt_sum(lindstedt_expand(3, w_hat, OMEGA, MU), lam)
    gap = flat_weighted_norm(trunc, z.flat() - series, s)
    assert gap <= 1e-8 * z.norm(s)


def test_extract_A_symmetrises_resonant_block():
    trunc = _trunc()
    omega = np.array([1.0])
    slots = {0: trunc.slots_of(0), 1: trunc.slots_of(1)}
    level = cluster_decompose({0: np.array([1.0]), 1: np.array([1.5])}, slots, 0.5, 1)
    sets = resonant_sets(omega, level, trunc)
    jet = JetFunctional.zeros(trunc, 1)
    i = trunc.q_index([1]) * trunc.n_z
    jet.L[i, i] = 0.3 + 0.1j
    A, a, defect = extract_A(jet, level, omega, sets)
    assert a[0, 0] == pytest.approx(0.3)
    assert defect == pytest.approx(0.2)
    assert A.blocks[trunc.q_index([-1])][0, 0] == pytest.approx(0.3)
    assert A.hermiticity_defect() == 0.0
    assert A.conjugation_defect() == 0.0


def test_gamma_symbol_far_from_clusters_is_free_inverse():
    trunc = _trunc()
    root = root_level(trunc, 0.5, MU)
    slots = {0: trunc.slots_of(0), 1: trunc.slots_of(1)}
    level = cluster_decompose({0: MU[:1], 1: MU[1:]}, slots, 0.5, 1, root)
    a_history = [np.zeros((2, 2)), np.zeros((2, 2))]
    symbol = gamma_symbol([root, level], a_history, MU, 1, 0.3)
    np.testing.assert_allclose(symbol, np.diag(1.0 / (0.09 - MU ** 2)), atol=1e-14)


def test_fit_gamma_exponent():
    norms = {n: 3.0 * 2.0 ** n for n in range(2, 6)}
    assert fit_gamma_exponent(norms, 0.5) == pytest.approx(1.0)


def test_iterates_are_fourier_maps():
    trunc = _trunc()
    state = run_rg(trunc, OMEGA, MU, _random_jet(trunc, scale=1e-3), RGParams(max_levels=2))
    assert all(isinstance(z, FourierMap) for z in state.iterates)
    assert len(state.iterates) == state.n + 1


def test_gamma_continuity_report():
    trunc = _trunc()
    state = run_rg(trunc, OMEGA, MU, _random_jet(trunc, scale=1e-3), RGParams(max_levels=2))
    report = state.gamma_continuity(1, [1])
    assert report.n == 1
    assert report.shift == pytest.approx(0.37)
    assert report.points > 0
    assert np.isfinite(report.gamma_norm)
    assert report.slope == pytest.approx(report.delta_norm / 0.37)
