import numpy as np
import pytest

from core.clusters import (
    build_projectors, cluster_decompose, cutoff, drift, nesting_defect, projector_algebra_defect,
    resonant_sets, root_level, split_spectrum,
)
from core.errors import ContractionError, InadmissibleFrequencyError
from core.mode_space import Truncation


def _trunc():
    return Truncation(d=1, Q=3, Kmax=1, mults=(1, 1))


def _slots():
    return {0: np.array([0]), 1: np.array([1])}


def test_split_spectrum_gap_is_strict():
    assert split_spectrum(np.array([1.0, 1.05, 1.5]), 0.1) == [[0, 1], [2]]
    assert split_spectrum(np.array([0.5, 1.0]), 0.5) == [[0, 1]]
    assert split_spectrum(np.array([1.0, 1.01]), 0.1, labels=["a", "b"]) == [[0], [1]]


def test_decompose_scalar_spectrum_by_level():
    spectrum = {0: np.array([1.0, 1.1, 2.0])}
    slots = {0: np.arange(3)}
    coarse = cluster_decompose(spectrum, slots, 0.5, 1)
    intervals = [c.interval for c in coarse.clusters]
    np.testing.assert_allclose(intervals, [(1.0, 1.1), (2.0, 2.0)], rtol=1e-14)
    assert coarse.sibling_gap() == pytest.approx(0.9)
    fine = cluster_decompose(spectrum, slots, 0.5, 4)
    assert len(fine.clusters) == 3
    assert fine.sibling_gap() > 0.5 ** 4


def test_decompose_hermitian_block_reproduces_block():
    rng = np.random.default_rng(3)
    raw = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    block = 4.0 * np.eye(3) + 0.1 * (raw + np.conj(raw.T))
    level = cluster_decompose({0: block}, {0: np.arange(3)}, 0.5, 6)
    rebuilt = sum(c.basis @ np.diag(c.eigenvalues ** 2) @ np.conj(c.basis.T) for c in level.clusters)
    np.testing.assert_allclose(rebuilt, block, atol=1e-12)
    assert projector_algebra_defect(level, 3) <= 1e-12
    for c in level.clusters:
        pivot = np.argmax(np.abs(c.basis), axis=0)
        values = c.basis[pivot, np.arange(c.basis.shape[1])]
        np.testing.assert_allclose(values.imag, 0.0, atol=1e-14)
        assert np.all(values.real > 0)


def test_decompose_rejects_indefinite_block():
    with pytest.raises(ContractionError):
        cluster_decompose({0: np.diag([1.0, -1.0])}, {0: np.arange(2)}, 0.5, 1)


def test_cutoff_profile():
    interval = (1.0, 1.2)
    eta, n = 0.5, 2
    h = eta ** n / 8
    values = cutoff(np.array([1.1, 1.2 + h, 1.2 + 1.5 * h, 1.2 + 2 * h, 1.0 - 3 * h]), interval, eta, n)
    np.testing.assert_allclose(values, [1.0, 1.0, 0.5, 0.0, 0.0], atol=1e-12)
    assert cutoff(np.array([-1.1]), interval, eta, n)[0] == 1.0


def test_resonant_sets_and_projectors():
    trunc = _trunc()
    level = cluster_decompose({0: np.array([1.0]), 1: np.array([2.5])}, _slots(), 0.5, 1)
    sets = resonant_sets(np.array([1.0]), level, trunc)
    expected = sorted([trunc.q_index([-1]), trunc.q_index([1])])
    assert sorted(sets[(0, 0)].tolist()) == expected
    assert sets[(1, 0)].size == 0

    P, Q, P_hat = build_projectors(level, np.array([1.0]), trunc)
    np.testing.assert_allclose(P.blocks[trunc.q_index([1])], np.diag([1.0, 0.0]), atol=1e-15)
    np.testing.assert_allclose(P.blocks[trunc.zero_index], 0.0)
    np.testing.assert_allclose((P + Q).blocks, np.broadcast_to(np.eye(2), P.blocks.shape))
    np.testing.assert_allclose(P_hat.blocks[trunc.q_index([-1])], np.diag([1.0, 0.0]))
    assert P.conjugation_defect() <= 1e-15


def test_root_level_projectors_are_identity():
    trunc = _trunc()
    root = root_level(trunc, 0.5, np.array([1.0, 2.0]))
    P, Q, _ = build_projectors(root, np.array([1.0]), trunc)
    np.testing.assert_allclose(P.blocks, np.broadcast_to(np.eye(2), P.blocks.shape))
    np.testing.assert_allclose(Q.blocks, 0.0)


def test_overlapping_sets_are_inadmissible():
    level = cluster_decompose({0: np.array([1.0]), 1: np.array([1.05])}, _slots(), 0.5, 1)
    with pytest.raises(InadmissibleFrequencyError) as info:
        resonant_sets(np.array([1.0]), level, _trunc())
    assert abs(info.value.witness["q"][0]) == 1


def test_children_nest_in_root_and_do_not_drift():
    trunc = _trunc()
    root = root_level(trunc, 0.5, np.array([1.0, 2.0]))
    child = cluster_decompose({0: np.array([1.0]), 1: np.array([2.0])}, _slots(), 0.5, 1, root)
    assert [c.parent for c in child.clusters] == [(0, 0), (1, 0)]
    assert nesting_defect(child, root, trunc.n_z) == 0.0
    assert drift(child, [root]) == 0.0

    grandchild = cluster_decompose({0: np.array([1.01]), 1: np.array([2.0])}, _slots(), 0.5, 2, child)
    assert drift(grandchild, [root, child]) == pytest.approx(0.01 / 0.25)
