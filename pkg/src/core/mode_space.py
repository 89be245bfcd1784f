"""
Truncated sequence spaces for torus maps: Fourier blocks, norms and diagonal kernels.
Real maps are stored densely with the negative-q half synthesised from the positive half.
"""

import itertools
from enum import Enum
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utils.config import CONVOLUTION_WINDOW_CAP
from .errors import TruncationError
from .logger import Logger

logger = Logger().get_logger()


class Truncation(BaseModel):
    """
    Cutoffs of the working space: |q|_inf <= Q, normal modes k <= Kmax.

    ``mults[k]`` is the number of real slots carried by mode k. A mode whose
    partners are all tangential has multiplicity 0.
    """

    model_config = ConfigDict(frozen=True)

    d: int = Field(ge=1)
    Q: int = Field(ge=1)
    Kmax: int = Field(ge=1)
    mults: Tuple[int, ...]

    @model_validator(mode="after")
    def _check_mults(self) -> "Truncation":
        if len(self.mults) != self.Kmax + 1:
            raise ValueError(f"mults needs Kmax + 1 = {self.Kmax + 1} entries, got {len(self.mults)}")
        if any(m < 0 for m in self.mults) or sum(self.mults) == 0:
            raise ValueError("multiplicities must be non-negative with at least one slot")
        return self

    @cached_property
    def n_q(self) -> int:
        return (2 * self.Q + 1) ** self.d

    @cached_property
    def n_z(self) -> int:
        return int(sum(self.mults))

    @property
    def size(self) -> int:
        """Dimension of the flattened (q, slot) space."""
        return self.n_q * self.n_z

    @cached_property
    def dbar(self) -> int:
        return max(self.mults)

    @cached_property
    def q_grid(self) -> np.ndarray:
        """All stored q in lexicographic order; row n_q - 1 - i is the negative of row i."""
        grid = list(itertools.product(range(-self.Q, self.Q + 1), repeat=self.d))
        return np.array(grid, dtype=int).reshape(self.n_q, self.d)

    @property
    def zero_index(self) -> int:
        return (self.n_q - 1) // 2

    @cached_property
    def slot_modes(self) -> np.ndarray:
        """Mode number k of every slot, ascending."""
        return np.repeat(np.arange(self.Kmax + 1), self.mults)

    def slots_of(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.slot_modes == k)

    def slot_weights(self, s: float) -> np.ndarray:
        return np.maximum(1, self.slot_modes).astype(float) ** s

    def q_index(self, q: Sequence[int]) -> int:
        """Row of q in ``q_grid``."""
        index = 0
        for component in q:
            if abs(component) > self.Q:
                raise TruncationError(f"q={tuple(q)} outside |q|_inf <= {self.Q}")
            index = index * (2 * self.Q + 1) + (int(component) + self.Q)
        return index

    def frequencies(self, omega: np.ndarray) -> np.ndarray:
        """omega . q for every stored q."""
        return self.q_grid @ np.asarray(omega, dtype=float)

    def check_same(self, other: "Truncation") -> None:
        if self != other:
            raise TruncationError(f"truncation mismatch: {self} vs {other}")


def _symmetrise(coeffs: np.ndarray) -> np.ndarray:
    """Overwrite the negative half with the conjugate of the positive half."""
    n_q = coeffs.shape[0]
    centre = (n_q - 1) // 2
    out = coeffs.copy()
    mirrored = np.conj(out[::-1])
    out[:centre] = mirrored[:centre]
    out[centre] = out[centre].real
    return out


class FourierMap:
    """Torus map into the normal-mode space: one complex block vector per q."""

    def __init__(self, trunc: Truncation, coeffs: Optional[np.ndarray] = None,
                 real: bool = True) -> None:
        self.trunc = trunc
        self.real = real
        if coeffs is None:
            coeffs = np.zeros((trunc.n_q, trunc.n_z), dtype=complex)
        coeffs = np.asarray(coeffs, dtype=complex).reshape(trunc.n_q, trunc.n_z)
        self.coeffs = _symmetrise(coeffs) if real else coeffs.copy()

    @classmethod
    def zeros(cls, trunc: Truncation) -> "FourierMap":
        return cls(trunc)

    @classmethod
    def from_flat(cls, trunc: Truncation, vector: np.ndarray, real: bool = True) -> "FourierMap":
        return cls(trunc, np.asarray(vector).reshape(trunc.n_q, trunc.n_z), real)

    def flat(self) -> np.ndarray:
        return self.coeffs.reshape(-1).copy()

    def block(self, q: Sequence[int], k: int) -> np.ndarray:
        return self.coeffs[self.trunc.q_index(q), self.trunc.slots_of(k)]

    def __add__(self, other: "FourierMap") -> "FourierMap":
        self.trunc.check_same(other.trunc)
        return FourierMap(self.trunc, self.coeffs + other.coeffs, self.real and other.real)

    def __sub__(self, other: "FourierMap") -> "FourierMap":
        self.trunc.check_same(other.trunc)
        return FourierMap(self.trunc, self.coeffs - other.coeffs, self.real and other.real)

    def scale(self, factor: float) -> "FourierMap":
        return FourierMap(self.trunc, self.coeffs * factor, self.real and np.isrealobj(factor))

    def norm(self, s: float) -> float:
        return weighted_norm(self, s)

    def reality_defect(self) -> float:
        """max |z(-q) - conj z(q)|; exactly 0 for maps flagged real."""
        return float(np.max(np.abs(self.coeffs[::-1] - np.conj(self.coeffs)), initial=0.0))

    def to_json(self) -> Dict[str, Any]:
        entries = []
        for i, q in enumerate(self.trunc.q_grid):
            for k in range(self.trunc.Kmax + 1):
                slots = self.trunc.slots_of(k)
                if len(slots) == 0:
                    continue
                block = self.coeffs[i, slots]
                if not np.any(block):
                    continue
                entries.append({"q": [int(c) for c in q], "k": k,
                                "re": [float(v) for v in block.real],
                                "im": [float(v) for v in block.imag]})
        return {"d": self.trunc.d, "Q": self.trunc.Q, "Kmax": self.trunc.Kmax,
                "mults": list(self.trunc.mults), "real": self.real, "entries": entries}

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "FourierMap":
        trunc = Truncation(d=data["d"], Q=data["Q"], Kmax=data["Kmax"], mults=tuple(data["mults"]))
        coeffs = np.zeros((trunc.n_q, trunc.n_z), dtype=complex)
        for entry in data["entries"]:
            coeffs[trunc.q_index(entry["q"]), trunc.slots_of(entry["k"])] = (
                np.asarray(entry["re"]) + 1j * np.asarray(entry["im"]))
        # Stored entries already satisfy the reality relation; no re-synthesis needed
        out = cls(trunc, coeffs, real=False)
        out.real = bool(data.get("real", True))
        return out


class TangentialMap:
    """Fourier coefficients of the tangential corrections (Phi, J), each in C^d per q."""

    def __init__(self, trunc: Truncation, phi: Optional[np.ndarray] = None,
                 j: Optional[np.ndarray] = None, real: bool = True) -> None:
        self.trunc = trunc
        self.real = real
        shape = (trunc.n_q, trunc.d)
        phi = np.zeros(shape, dtype=complex) if phi is None else np.asarray(phi, dtype=complex).reshape(shape)
        j = np.zeros(shape, dtype=complex) if j is None else np.asarray(j, dtype=complex).reshape(shape)
        self.phi = _symmetrise(phi) if real else phi.copy()
        self.j = _symmetrise(j) if real else j.copy()

    @classmethod
    def zeros(cls, trunc: Truncation) -> "TangentialMap":
        return cls(trunc)

    def norm(self) -> float:
        """Sum over q of |phi(q)| + |j(q)| (Euclidean in C^d)."""
        return float(np.sum(np.linalg.norm(self.phi, axis=1) + np.linalg.norm(self.j, axis=1)))

    def __sub__(self, other: "TangentialMap") -> "TangentialMap":
        return TangentialMap(self.trunc, self.phi - other.phi, self.j - other.j, self.real and other.real)

    def to_json(self) -> Dict[str, Any]:
        entries = []
        for i, q in enumerate(self.trunc.q_grid):
            if not (np.any(self.phi[i]) or np.any(self.j[i])):
                continue
            entries.append({"q": [int(c) for c in q],
                            "phi_re": [float(v) for v in self.phi[i].real],
                            "phi_im": [float(v) for v in self.phi[i].imag],
                            "j_re": [float(v) for v in self.j[i].real],
                            "j_im": [float(v) for v in self.j[i].imag]})
        return {"entries": entries}

    @classmethod
    def from_json(cls, trunc: Truncation, data: Dict[str, Any]) -> "TangentialMap":
        out = cls(trunc)
        for entry in data["entries"]:
            i = trunc.q_index(entry["q"])
            out.phi[i] = np.asarray(entry["phi_re"]) + 1j * np.asarray(entry["phi_im"])
            out.j[i] = np.asarray(entry["j_re"]) + 1j * np.asarray(entry["j_im"])
        return out


class KernelTag(str, Enum):
    K0 = "K0"
    KN = "Kn"
    AN = "An"
    GAMMA = "Gamma"
    PROJECTOR = "Projector"


class DiagonalKernel:
    """A linear map acting q by q: (op z)(q) = op(q) z(q) with op(q) an n_z x n_z block."""

    def __init__(self, trunc: Truncation, blocks: np.ndarray, tag: KernelTag) -> None:
        self.trunc = trunc
        self.blocks = np.asarray(blocks, dtype=complex).reshape(trunc.n_q, trunc.n_z, trunc.n_z)
        self.tag = KernelTag(tag)

    @classmethod
    def identity(cls, trunc: Truncation, tag: KernelTag = KernelTag.PROJECTOR) -> "DiagonalKernel":
        blocks = np.broadcast_to(np.eye(trunc.n_z, dtype=complex), (trunc.n_q, trunc.n_z, trunc.n_z))
        return cls(trunc, blocks.copy(), tag)

    @classmethod
    def zeros(cls, trunc: Truncation, tag: KernelTag) -> "DiagonalKernel":
        return cls(trunc, np.zeros((trunc.n_q, trunc.n_z, trunc.n_z), dtype=complex), tag)

    @classmethod
    def free(cls, trunc: Truncation, omega: np.ndarray, mu: np.ndarray) -> "DiagonalKernel":
        """K_0(q) = (omega.q)^2 - mu^2, diagonal in the slots."""
        symbol = trunc.frequencies(omega)[:, None] ** 2 - np.asarray(mu, dtype=float)[None, :] ** 2
        blocks = np.zeros((trunc.n_q, trunc.n_z, trunc.n_z), dtype=complex)
        idx = np.arange(trunc.n_z)
        blocks[:, idx, idx] = symbol
        return cls(trunc, blocks, KernelTag.K0)

    def compose(self, other: "DiagonalKernel", tag: Optional[KernelTag] = None) -> "DiagonalKernel":
        self.trunc.check_same(other.trunc)
        return DiagonalKernel(self.trunc, self.blocks @ other.blocks, tag or self.tag)

    def __add__(self, other: "DiagonalKernel") -> "DiagonalKernel":
        self.trunc.check_same(other.trunc)
        return DiagonalKernel(self.trunc, self.blocks + other.blocks, self.tag)

    def __sub__(self, other: "DiagonalKernel") -> "DiagonalKernel":
        self.trunc.check_same(other.trunc)
        return DiagonalKernel(self.trunc, self.blocks - other.blocks, self.tag)

    def operator_norm(self) -> float:
        """Largest spectral norm over the q blocks."""
        return float(np.max(np.linalg.norm(self.blocks, ord=2, axis=(1, 2)), initial=0.0))

    def hermiticity_defect(self) -> float:
        return float(np.max(np.abs(self.blocks - np.conj(np.swapaxes(self.blocks, 1, 2))), initial=0.0))

    def conjugation_defect(self) -> float:
        """max |op(-q) - conj op(q)|."""
        return float(np.max(np.abs(self.blocks[::-1] - np.conj(self.blocks)), initial=0.0))

    def as_matrix(self) -> np.ndarray:
        """Dense block-diagonal matrix on the flattened (q, slot) space."""
        n_q, n_z = self.trunc.n_q, self.trunc.n_z
        dense = np.zeros((n_q * n_z, n_q * n_z), dtype=complex)
        for i in range(n_q):
            dense[i * n_z:(i + 1) * n_z, i * n_z:(i + 1) * n_z] = self.blocks[i]
        return dense

    def apply_flat(self, vector: np.ndarray) -> np.ndarray:
        shaped = np.asarray(vector).reshape(self.trunc.n_q, self.trunc.n_z)
        return np.einsum("qab,qb->qa", self.blocks, shaped).reshape(-1)


def weighted_norm(z: FourierMap, s: float) -> float:
    """
    Sum over q and k of [k]^s |z_k(q)|, with [k] = max(1, k) and |.| Euclidean on each block.

    Examples:
        A single block z_2(q0) = (3, 4) has norm 10 at s=1 and 5 at s=0.
    """
    trunc = z.trunc
    total = 0.0
    for k in range(trunc.Kmax + 1):
        slots = trunc.slots_of(k)
        if len(slots) == 0:
            continue
        block_norms = np.linalg.norm(z.coeffs[:, slots], axis=1)
        total += max(1, k) ** s * float(np.sum(block_norms))
    return total


def flat_weighted_norm(trunc: Truncation, vector: np.ndarray, s: float) -> float:
    """weighted_norm for a vector on the flattened (q, slot) space."""
    return weighted_norm(FourierMap(trunc, np.asarray(vector).reshape(trunc.n_q, trunc.n_z), real=False), s)


def translate(z: FourierMap, beta: Sequence[complex]) -> FourierMap:
    """(tau_beta z)(q) = exp(i beta.q) z(q); imaginary beta reweights the decay."""
    beta = np.asarray(beta, dtype=complex)
    phase = np.exp(1j * (z.trunc.q_grid @ beta))
    real_shift = bool(np.all(beta.imag == 0))
    out = FourierMap(z.trunc, z.coeffs * phase[:, None], real=False)
    out.real = z.real and real_shift
    return out


def translate_tangential(y: TangentialMap, beta: Sequence[float]) -> TangentialMap:
    phase = np.exp(1j * (y.trunc.q_grid @ np.asarray(beta, dtype=float)))[:, None]
    return TangentialMap(y.trunc, y.phi * phase, y.j * phase, y.real)


def sequence_norm(a: np.ndarray, s: float) -> float:
    """Weighted l1 norm of a centred scalar sequence: sum of [j]^s |a_j|."""
    a = np.asarray(a)
    half = (len(a) - 1) // 2
    weights = np.maximum(1, np.abs(np.arange(-half, half + 1))).astype(float) ** s
    return float(np.sum(weights * np.abs(a)))


def convolve(a: np.ndarray, b: np.ndarray, s: float = 0.0,
             window: Optional[int] = None) -> np.ndarray:
    """
    Convolution of two centred scalar sequences on Z, truncated to |j| <= window.

    Args:
        a: Odd-length array, index j - (len - 1) / 2
        b: Odd-length array, same convention
        s: Weight used when logging the truncated tail mass
        window: Half-width of the result; defaults to the full support capped
            at CONVOLUTION_WINDOW_CAP

    Returns:
        np.ndarray: Centred array of length 2 * window + 1
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if len(a) % 2 == 0 or len(b) % 2 == 0:
        raise TruncationError("centred sequences need odd length")
    full = np.convolve(a, b)
    half = (len(full) - 1) // 2
    if window is None:
        window = min(half, CONVOLUTION_WINDOW_CAP)
    if window >= half:
        pad = window - half
        return np.pad(full, (pad, pad))
    kept = full[half - window: half + window + 1]
    tail = sequence_norm(full, s) - sequence_norm(np.pad(kept, (half - window, half - window)), s)
    logger.warning(f"Convolution truncated to |j| <= {window}, tail mass {tail:.3e} (s={s})")
    return kept.copy()


def apply_diagonal(op: DiagonalKernel, z: FourierMap) -> FourierMap:
    """(op z)(q) = op(q) z(q); reality survives when op(-q) = conj op(q)."""
    op.trunc.check_same(z.trunc)
    coeffs = np.einsum("qab,qb->qa", op.blocks, z.coeffs)
    out = FourierMap(z.trunc, coeffs, real=False)
    out.real = z.real and op.conjugation_defect() == 0.0
    return out


# Angle grids. A torus function is F(phi) = sum_q f(q) exp(-i q.phi), so
# synthesis is a forward FFT and analysis an inverse FFT.

def angle_grid(d: int, n_phi: int) -> np.ndarray:
    """Points of the uniform n_phi^d grid in C order, shape (n_phi**d, d)."""
    axis = 2.0 * np.pi * np.arange(n_phi) / n_phi
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _wrapped_indices(q_grid: np.ndarray, n_phi: int) -> Tuple[np.ndarray, ...]:
    return tuple((q_grid % n_phi).T)


def synthesize(q_grid: np.ndarray, coeffs: np.ndarray, n_phi: int) -> np.ndarray:
    """Values on the angle grid from coefficients on ``q_grid``; trailing axes are carried."""
    d = q_grid.shape[1]
    coeffs = np.asarray(coeffs, dtype=complex)
    tail = coeffs.shape[1:]
    spectrum = np.zeros((n_phi,) * d + tail, dtype=complex)
    np.add.at(spectrum, _wrapped_indices(q_grid, n_phi), coeffs)
    values = np.fft.fftn(spectrum, axes=tuple(range(d)))
    return values.reshape((n_phi ** d,) + tail)


def analyse(values: np.ndarray, d: int, n_phi: int, q_grid: np.ndarray) -> np.ndarray:
    """Fourier coefficients on ``q_grid`` of grid values shaped (n_phi**d, ...)."""
    values = np.asarray(values)
    tail = values.shape[1:]
    shaped = values.reshape((n_phi,) * d + tail)
    spectrum = np.fft.ifftn(shaped, axes=tuple(range(d)))
    return spectrum[_wrapped_indices(q_grid, n_phi)]


def box_grid(d: int, radius: int) -> np.ndarray:
    """Lexicographic integer vectors with |p|_inf <= radius."""
    return np.array(list(itertools.product(range(-radius, radius + 1), repeat=d)), dtype=int)

