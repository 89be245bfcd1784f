"""
Cluster decomposition of the renormalised normal spectrum and the smooth projectors built on it.
Clusters live inside one k-block; siblings are separated by gaps larger than eta^n.
"""

from typing import Dict, List, Optional, Tuple

import numpy as np

from utils.config import PROJECTOR_TOLERANCE
from .errors import ContractionError, InadmissibleFrequencyError
from .logger import Logger
from .mode_space import DiagonalKernel, KernelTag, Truncation

logger = Logger().get_logger()

ClusterKey = Tuple[int, int]


class Cluster:
    """One maximal group of renormalised frequencies in block k with its eigenspace."""

    def __init__(self, key: ClusterKey, eigenvalues: np.ndarray, basis: np.ndarray,
                 slots: np.ndarray, parent: Optional[ClusterKey]) -> None:
        self.key = key
        self.eigenvalues = np.asarray(eigenvalues, dtype=float)
        self.basis = np.asarray(basis, dtype=complex)
        self.slots = np.asarray(slots, dtype=int)
        self.parent = parent

    @property
    def interval(self) -> Tuple[float, float]:
        return float(self.eigenvalues[0]), float(self.eigenvalues[-1])

    @property
    def centre(self) -> float:
        lo, hi = self.interval
        return 0.5 * (lo + hi)

    def distance(self, kappa: np.ndarray) -> np.ndarray:
        """d(|kappa|, interval)."""
        lo, hi = self.interval
        value = np.abs(np.asarray(kappa, dtype=float))
        return np.maximum(0.0, np.maximum(lo - value, value - hi))

    def projector(self, n_z: int) -> np.ndarray:
        """Orthogonal projector onto the eigenspace, embedded in the full slot space."""
        out = np.zeros((n_z, n_z), dtype=complex)
        out[np.ix_(self.slots, self.slots)] = self.basis @ np.conj(self.basis.T)
        return out

    def embedded_basis(self, n_z: int) -> np.ndarray:
        out = np.zeros((n_z, self.basis.shape[1]), dtype=complex)
        out[self.slots] = self.basis
        return out

    def describe(self) -> Dict[str, object]:
        lo, hi = self.interval
        return {"key": list(self.key), "eigenvalues": self.eigenvalues.tolist(),
                "interval": [lo, hi], "centre": self.centre,
                "parent": None if self.parent is None else list(self.parent)}


class ClusterLevel:
    """All clusters at level n; level 0 has one root cluster per block with cutoff 1."""

    def __init__(self, n: int, eta: float, clusters: List[Cluster]) -> None:
        self.n = n
        self.eta = eta
        self.clusters = clusters
        self.by_key = {c.key: c for c in clusters}

    @property
    def scale(self) -> float:
        return self.eta ** self.n

    def table(self) -> List[Dict[str, object]]:
        return [c.describe() for c in self.clusters]

    def intervals(self) -> List[Tuple[ClusterKey, Tuple[float, float]]]:
        return [(c.key, c.interval) for c in self.clusters]

    def sibling_gap(self) -> float:
        """Smallest distance between two clusters of the same block (inf if none)."""
        best = np.inf
        blocks: Dict[int, List[Cluster]] = {}
        for c in self.clusters:
            blocks.setdefault(c.key[0], []).append(c)
        for members in blocks.values():
            members = sorted(members, key=lambda c: c.interval[0])
            for left, right in zip(members, members[1:]):
                best = min(best, right.interval[0] - left.interval[1])
        return float(best)


def _fix_phase(vectors: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude component of every column real and positive."""
    out = vectors.copy()
    for col in range(out.shape[1]):
        pivot = np.argmax(np.abs(out[:, col]))
        value = out[pivot, col]
        if value != 0:
            out[:, col] *= np.conj(value) / abs(value)
    return out


def split_spectrum(values: np.ndarray, gap: float,
                   labels: Optional[List[object]] = None) -> List[List[int]]:
    """Group sorted values; split where the gap exceeds ``gap`` strictly or the label changes."""
    groups: List[List[int]] = []
    for i, value in enumerate(values):
        if groups:
            prev = groups[-1][-1]
            same_label = labels is None or labels[i] == labels[prev]
            if value - values[prev] <= gap and same_label:
                groups[-1].append(i)
                continue
        groups.append([i])
    return groups


def root_level(trunc: Truncation, eta: float, mu_slots: np.ndarray) -> ClusterLevel:
    clusters = []
    for k in range(trunc.Kmax + 1):
        slots = trunc.slots_of(k)
        if len(slots) == 0:
            continue
        values = np.sort(mu_slots[slots])
        clusters.append(Cluster((k, 0), values, np.eye(len(slots)), slots, None))
    return ClusterLevel(0, eta, clusters)


def cluster_decompose(mu_squared: Dict[int, np.ndarray], slots_by_k: Dict[int, np.ndarray],
                      eta: float, n: int, parents: Optional[ClusterLevel] = None) -> ClusterLevel:
    """
    Maximal decomposition of sigma(mu~_n) into clusters with gaps > eta^n.

    Args:
        mu_squared: Per-block hermitian mu~_n^2 (a 1D array is read as the spectrum mu~ itself)
        slots_by_k: Slot indices of every block in the full slot space
        eta: Scale parameter
        n: Level
        parents: Level n - 1; each eigenvector is attached to the parent holding most of it

    Returns:
        ClusterLevel: Clusters keyed (k, i) with i ascending in frequency
    """
    gap = eta ** n
    clusters: List[Cluster] = []
    for k in sorted(mu_squared):
        block = np.asarray(mu_squared[k])
        if block.ndim == 1:
            block = np.diag(block.astype(float) ** 2)
        block = 0.5 * (block + np.conj(block.T))
        zeta, vectors = np.linalg.eigh(block)
        if zeta[0] <= 0:
            raise ContractionError(f"mu~^2 not positive definite in block {k} (min {zeta[0]:.3e})",
                                   {"block": k, "min_eigenvalue": float(zeta[0])})
        freqs = np.sqrt(zeta)
        vectors = _fix_phase(vectors)

        labels = None
        if parents is not None:
            candidates = [c for c in parents.clusters if c.key[0] == k]
            labels = []
            for col in range(vectors.shape[1]):
                weights = [np.linalg.norm(np.conj(c.basis.T) @ vectors[:, col]) for c in candidates]
                labels.append(candidates[int(np.argmax(weights))].key)

        for i, members in enumerate(split_spectrum(freqs, gap, labels)):
            parent = labels[members[0]] if labels is not None else None
            clusters.append(Cluster((k, i), freqs[members], vectors[:, members],
                                    slots_by_k[k], parent))
    return ClusterLevel(n, eta, clusters)


def cutoff(kappa: np.ndarray, interval: Tuple[float, float], eta: float, n: int) -> np.ndarray:
    """
    C^1 cubic cutoff: 1 within distance eta^n / 8 of the interval, 0 beyond eta^n / 4.

    The steepest slope is 12 eta^-n.
    """
    lo, hi = interval
    value = np.abs(np.asarray(kappa, dtype=float))
    dist = np.maximum(0.0, np.maximum(lo - value, value - hi))
    h = eta ** n / 8.0
    t = np.clip((dist - h) / h, 0.0, 1.0)
    return 1.0 - (3.0 * t ** 2 - 2.0 * t ** 3)


def resonant_sets(omega: np.ndarray, level: ClusterLevel, trunc: Truncation,
                  previous: Optional[Dict[ClusterKey, np.ndarray]] = None,
                  parents: Optional[ClusterLevel] = None) -> Dict[ClusterKey, np.ndarray]:
    """
    S^n_{k,i}: indices of stored q with d(|omega.q|, C^n_{k,i}) < eta^n / 4.

    Overlapping sets abort; sets escaping their parent's set are logged.
    """
    kappa = trunc.frequencies(omega)
    width = 0.25 * level.scale
    sets = {c.key: np.flatnonzero(c.distance(kappa) < width) for c in level.clusters}

    owner: Dict[int, ClusterKey] = {}
    for key, indices in sets.items():
        for i in indices:
            if int(i) in owner:
                q = trunc.q_grid[i].tolist()
                raise InadmissibleFrequencyError(
                    f"resonant sets of clusters {owner[int(i)]} and {key} overlap at q={q}",
                    {"q": q, "clusters": [list(owner[int(i)]), list(key)], "level": level.n})
            owner[int(i)] = key

    if previous is not None and parents is not None and level.n > 1:
        for c in level.clusters:
            if c.parent is None or c.parent not in previous:
                continue
            escaped = np.setdiff1d(sets[c.key], previous[c.parent])
            if escaped.size:
                logger.warning(f"Level {level.n}: {escaped.size} q of cluster {c.key} outside parent set")
    return sets


def build_projectors(level: ClusterLevel, omega: np.ndarray,
                     trunc: Truncation) -> Tuple[DiagonalKernel, DiagonalKernel, DiagonalKernel]:
    """
    (P_n, Q_n, Phat_n) with P_n(q) = sum chi(omega.q) projector, Q_n = 1 - P_n and Phat_n
    built on the indicator of the resonant window.
    """
    identity = DiagonalKernel.identity(trunc)
    if level.n == 0:
        return identity, DiagonalKernel.zeros(trunc, KernelTag.PROJECTOR), DiagonalKernel.identity(trunc)

    kappa = trunc.frequencies(omega)
    p_blocks = np.zeros((trunc.n_q, trunc.n_z, trunc.n_z), dtype=complex)
    hat_blocks = np.zeros_like(p_blocks)
    for c in level.clusters:
        chi = cutoff(kappa, c.interval, level.eta, level.n)
        window = (c.distance(kappa) < 0.25 * level.scale).astype(float)
        if not np.any(window):
            continue
        proj = c.projector(trunc.n_z)
        p_blocks += chi[:, None, None] * proj[None, :, :]
        hat_blocks += window[:, None, None] * proj[None, :, :]
    P = DiagonalKernel(trunc, p_blocks, KernelTag.PROJECTOR)
    return P, identity - P, DiagonalKernel(trunc, hat_blocks, KernelTag.PROJECTOR)


def projector_algebra_defect(level: ClusterLevel, n_z: int) -> float:
    """max over cluster pairs of |P_a P_b - delta_ab P_a|."""
    worst = 0.0
    projectors = [(c.key, c.projector(n_z)) for c in level.clusters]
    for key_a, pa in projectors:
        for key_b, pb in projectors:
            target = pa if key_a == key_b else np.zeros_like(pa)
            worst = max(worst, float(np.max(np.abs(pa @ pb - target))))
    return worst


def nesting_defect(level: ClusterLevel, parents: ClusterLevel, n_z: int) -> float:
    """max |P_child P_parent - P_child| over children, and zero when P_child lies in its parent."""
    worst = 0.0
    for c in level.clusters:
        if c.parent is None:
            continue
        parent = parents.by_key[c.parent].projector(n_z)
        child = c.projector(n_z)
        worst = max(worst, float(np.max(np.abs(child @ parent - child))))
    if worst > PROJECTOR_TOLERANCE:
        logger.warning(f"Level {level.n}: eigenspaces leave their parents by {worst:.2e}")
    return worst


def drift(level: ClusterLevel, ancestors: List[ClusterLevel]) -> float:
    """
    Worst ratio of the sup-inf distance to a level-m ancestor over eta^(m+1).

    Values above 1 mean a cluster wandered further than its ancestors allow.
    """
    worst = 0.0
    for c in level.clusters:
        key = c.parent
        for ancestor in reversed(ancestors):
            if key is None or ancestor.n == 0:
                break
            parent = ancestor.by_key[key]
            distance = float(np.max(parent.distance(c.eigenvalues)))
            worst = max(worst, distance / ancestor.eta ** (ancestor.n + 1))
            key = parent.parent
    return worst
