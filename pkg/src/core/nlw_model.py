"""
The 1D nonlinear wave equation u_tt = u_xx - m u - f(u) on [0, 2 pi] with periodic boundary conditions.
Eigenbasis, quartic tensor, collocated nonlinearity, energy split and hypothesis checks.
"""

import itertools
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import Polynomial
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from utils.config import (
    AMPLITUDE_SCALE, ANALYTICITY_RADIUS, COLLOCATION_FACTOR, DEFAULT_MASS,
    DEFAULT_SOBOLEV_WEIGHT, DEFAULT_SPACE_CUTOFF,
)
from .errors import ParameterError, TruncationError
from .jets import JetFunctional, check_dense_size
from .logger import Logger
from .mode_space import TangentialMap, Truncation, analyse, angle_grid, box_grid, synthesize

logger = Logger().get_logger()


class NLWConfig(BaseModel):
    """
    Model block of a run.

    ``f_coeffs`` lists c_3, c_4, ... so that f(u) = c_3 u^3 + c_4 u^4 + ...
    """

    model_config = ConfigDict(frozen=True)

    m: float = Field(default=DEFAULT_MASS, gt=0)
    f_coeffs: Tuple[float, ...] = (1.0,)
    tangential_set: Tuple[int, ...] = (1,)
    space_cutoff: int = Field(default=DEFAULT_SPACE_CUTOFF, ge=1)
    s: float = DEFAULT_SOBOLEV_WEIGHT

    @field_validator("tangential_set")
    @classmethod
    def _distinct_moduli(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(value) < 1:
            raise ValueError("tangential_set needs at least one index")
        moduli = [abs(n) for n in value]
        if len(set(moduli)) != len(moduli):
            raise ValueError(f"tangential indices need distinct |n|: {value}")
        return value

    @model_validator(mode="after")
    def _fits_space_cutoff(self) -> "NLWConfig":
        if max(abs(n) for n in self.tangential_set) > self.space_cutoff:
            raise ValueError("tangential indices must lie within space_cutoff")
        return self

    @property
    def d(self) -> int:
        return len(self.tangential_set)


class QuarticTensor:
    """Sparse g_ijkl = integral of psi_i psi_j psi_k psi_l over indices |n| <= cutoff."""

    def __init__(self, cutoff: int) -> None:
        self.cutoff = cutoff
        self.entries: Dict[Tuple[int, int, int, int], float] = {}
        indices = range(-cutoff, cutoff + 1)
        for key in itertools.combinations_with_replacement(indices, 4):
            if not selection_rule(*key):
                continue
            value = quartic_coefficient(*key)
            if value != 0.0:
                self.entries[key] = value

    def __getitem__(self, key: Sequence[int]) -> float:
        return self.entries.get(tuple(sorted(key)), 0.0)

    def __len__(self) -> int:
        return len(self.entries)


def eigenvalue(n: int, m: float) -> float:
    """zeta_n = n^2 + m; the normal frequency is its square root."""
    if m <= 0:
        raise ParameterError(f"mass m must be positive, got {m}")
    return float(n * n + m)


def normal_frequency(n: int, m: float) -> float:
    return float(np.sqrt(eigenvalue(n, m)))


def basis_value(n: int, x: np.ndarray) -> np.ndarray:
    """psi_0 = 1/sqrt(2 pi), psi_n = cos(nx)/sqrt(pi), psi_{-n} = sin(nx)/sqrt(pi)."""
    x = np.asarray(x, dtype=float)
    if n == 0:
        return np.full_like(x, 1.0 / np.sqrt(2.0 * np.pi))
    if n > 0:
        return np.cos(n * x) / np.sqrt(np.pi)
    return np.sin(-n * x) / np.sqrt(np.pi)


def _exponential_terms(n: int) -> List[Tuple[int, complex]]:
    """psi_n as a list of (frequency, coefficient) in exp(i freq x)."""
    if n == 0:
        return [(0, 1.0 / np.sqrt(2.0 * np.pi))]
    c = 1.0 / np.sqrt(np.pi)
    if n > 0:
        return [(n, c / 2), (-n, c / 2)]
    return [(-n, c / 2j), (n, -c / 2j)]


def selection_rule(i: int, j: int, k: int, l: int) -> bool:
    """True when some choice of signs makes |i| +- |j| +- |k| +- |l| vanish."""
    a, b, c, e = abs(i), abs(j), abs(k), abs(l)
    return any(a + sb * b + sc * c + se * e == 0
               for sb, sc, se in itertools.product((1, -1), repeat=3))


def quartic_coefficient(i: int, j: int, k: int, l: int) -> float:
    """Exact integral of psi_i psi_j psi_k psi_l over [0, 2 pi] by product-to-sum expansion."""
    if not selection_rule(i, j, k, l):
        return 0.0
    total = 0.0 + 0.0j
    for terms in itertools.product(*(_exponential_terms(n) for n in (i, j, k, l))):
        if sum(freq for freq, _ in terms) == 0:
            total += np.prod([coef for _, coef in terms])
    return float((2.0 * np.pi * total).real)


class Nonlinearity:
    """Polynomial f with its antiderivative and derivatives, optionally in the scaled field."""

    def __init__(self, f_coeffs: Sequence[float], scale: float = 1.0) -> None:
        coeffs = [0.0, 0.0, 0.0] + [float(c) for c in f_coeffs]
        # f_v(v) = f(scale v) / scale
        scaled = [c * scale ** (p - 1) for p, c in enumerate(coeffs)]
        self.f = Polynomial(scaled)
        self.g = self.f.integ()
        self.scale = scale

    @cached_property
    def derivatives(self) -> List[Polynomial]:
        """[f, f', f'', f''']"""
        return [self.f.deriv(m) for m in range(4)]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.f.coef)


class SpaceBasis:
    """Collocation grid with the eigenfunctions of modes -N..N sampled on it."""

    def __init__(self, cutoff: int) -> None:
        self.cutoff = cutoff
        self.n_x = COLLOCATION_FACTOR * cutoff + 1
        self.x = 2.0 * np.pi * np.arange(self.n_x) / self.n_x
        self.weight = 2.0 * np.pi / self.n_x
        self.modes = np.arange(-cutoff, cutoff + 1)
        self.psi = np.stack([basis_value(int(n), self.x) for n in self.modes], axis=1)

    def column(self, n: int) -> int:
        return int(n) + self.cutoff

    def field(self, q: np.ndarray) -> np.ndarray:
        """u(x_j) = sum_n q_n psi_n(x_j); q has trailing axis over modes -N..N."""
        return np.asarray(q) @ self.psi.T

    def project(self, values: np.ndarray, columns: Optional[np.ndarray] = None) -> np.ndarray:
        """integral of values * psi_n for the selected columns; values has trailing x axis."""
        psi = self.psi if columns is None else self.psi[:, columns]
        return self.weight * (np.asarray(values) @ psi)


def gradient_G(q_coeffs: np.ndarray, f_coeffs: Sequence[float],
               s: float = DEFAULT_SOBOLEV_WEIGHT) -> np.ndarray:
    """
    Components n -> integral of f(u) psi_n with u = sum q_n psi_n, by collocation.

    Args:
        q_coeffs: Coefficients of modes -N..N (length 2N + 1)
        f_coeffs: c_3, c_4, ... of the polynomial nonlinearity
        s: Weight of the norm checked against the analyticity radius

    Returns:
        np.ndarray: Gradient components in the same layout as ``q_coeffs``
    """
    q_coeffs = np.asarray(q_coeffs, dtype=float)
    cutoff = (len(q_coeffs) - 1) // 2
    weights = np.maximum(1, np.abs(np.arange(-cutoff, cutoff + 1))).astype(float) ** s
    size = float(np.sum(weights * np.abs(q_coeffs)))
    if size > ANALYTICITY_RADIUS:
        raise TruncationError(f"||q||_s = {size:.3e} exceeds analyticity radius {ANALYTICITY_RADIUS}")
    basis = SpaceBasis(cutoff)
    f = Nonlinearity(f_coeffs).f
    return basis.project(f(basis.field(q_coeffs)))


class HypothesisReport(BaseModel):
    positive: bool
    distinct: bool
    growth_constant: float
    gap_constants: List[float]
    xi_fit: float
    multiplicities: List[int]
    passed: bool


def check_hypotheses(cfg: NLWConfig, k_max: int = 1000, Kmax: int = 6) -> HypothesisReport:
    """Spectral growth, gap asymptotics and multiplicities of the NLW normal spectrum."""
    k = np.arange(0, k_max + 1, dtype=float)
    mu = np.sqrt(k ** 2 + cfg.m)
    positive = bool(np.all(mu > 0))
    distinct = bool(np.all(np.diff(mu) > 0))
    growth = float(mu[-1] / k[-1])

    gaps = []
    for l in (1, 2, 3):
        gaps.append(float(mu[-1] - mu[-1 - l]))
    # mu_{k+1} - mu_k - c_1 = O(k^-xi); the window keeps the deviation well above the error in c_1
    spacing = np.diff(mu)
    ks = k[:-1]
    window = (ks >= 10) & (ks <= min(100, k_max))
    deviation = np.abs(spacing[window] - gaps[0])
    slope = np.polyfit(np.log(ks[window]), np.log(deviation), 1)[0]
    xi = float(-slope)

    mults = NLWModel(cfg, min(Kmax, cfg.space_cutoff)).mults
    passed = positive and distinct and abs(growth - 1.0) < 1e-3 and xi >= 1.0
    logger.info(f"Hypotheses: growth c={growth:.6f}, gaps={['%.6f' % g for g in gaps]}, xi={xi:.3f}")
    return HypothesisReport(positive=positive, distinct=distinct, growth_constant=growth,
                            gap_constants=gaps, xi_fit=xi, multiplicities=list(mults), passed=passed)


class NLWModel:
    """
    Mode bookkeeping and physics of the truncated NLW.

    Normal slots run over k = 0..Kmax with the cosine mode +k first and the
    sine mode -k second; tangential indices are left out.
    """

    def __init__(self, cfg: NLWConfig, Kmax: int) -> None:
        if Kmax > cfg.space_cutoff:
            raise TruncationError(f"Kmax={Kmax} exceeds space_cutoff={cfg.space_cutoff}")
        self.cfg = cfg
        self.Kmax = Kmax
        self.m = cfg.m
        self.tangential = list(cfg.tangential_set)
        self.basis = SpaceBasis(cfg.space_cutoff)
        self.nonlinearity = Nonlinearity(cfg.f_coeffs)
        self.scaled_nonlinearity = Nonlinearity(cfg.f_coeffs, AMPLITUDE_SCALE)

        slots: List[int] = []
        mults: List[int] = []
        for k in range(Kmax + 1):
            candidates = [0] if k == 0 else [k, -k]
            kept = [n for n in candidates if n not in self.tangential]
            slots.extend(kept)
            mults.append(len(kept))
        self.normal_modes = np.array(slots, dtype=int)
        self.mults = tuple(mults)

    @property
    def d(self) -> int:
        return len(self.tangential)

    def truncation(self, Q: int) -> Truncation:
        return Truncation(d=self.d, Q=Q, Kmax=self.Kmax, mults=self.mults)

    @cached_property
    def tangential_mu(self) -> np.ndarray:
        return np.array([normal_frequency(n, self.m) for n in self.tangential])

    @cached_property
    def normal_mu(self) -> np.ndarray:
        return np.array([normal_frequency(int(n), self.m) for n in self.normal_modes])

    @cached_property
    def tangential_columns(self) -> np.ndarray:
        return np.array([self.basis.column(n) for n in self.tangential], dtype=int)

    @cached_property
    def normal_columns(self) -> np.ndarray:
        return np.array([self.basis.column(n) for n in self.normal_modes], dtype=int)

    @cached_property
    def all_mu(self) -> np.ndarray:
        return np.sqrt(self.basis.modes.astype(float) ** 2 + self.m)

    @cached_property
    def quartic_tensor(self) -> QuarticTensor:
        return QuarticTensor(max(abs(n) for n in self.tangential))

    # Physical-unit dynamics on the full mode vector (modes -N..N)

    def potential(self, q: np.ndarray) -> np.ndarray:
        """G(q) = integral of g(u), g' = f."""
        return self.basis.weight * np.sum(self.nonlinearity.g(self.basis.field(q)), axis=-1)

    def force(self, q: np.ndarray) -> np.ndarray:
        """dG/dq_n for every mode."""
        return self.basis.project(self.nonlinearity.f(self.basis.field(q)))

    def hamiltonian(self, q: np.ndarray, p: np.ndarray) -> np.ndarray:
        quadratic = 0.5 * np.sum(p ** 2 + (self.all_mu ** 2) * q ** 2, axis=-1)
        return quadratic + self.potential(q)

    def hamiltonian_split(self, q: np.ndarray, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(H_d, H_inf): tangential modes alone, and everything else including the coupling."""
        q = np.asarray(q, dtype=float)
        p = np.asarray(p, dtype=float)
        mask = np.zeros(len(self.basis.modes), dtype=bool)
        mask[self.tangential_columns] = True
        q_d = np.where(mask, q, 0.0)
        h_d = 0.5 * np.sum(np.where(mask, p ** 2 + self.all_mu ** 2 * q ** 2, 0.0), axis=-1) + self.potential(q_d)
        h_inf = (0.5 * np.sum(np.where(mask, 0.0, p ** 2 + self.all_mu ** 2 * q ** 2), axis=-1)
                 + self.potential(q) - self.potential(q_d))
        return h_d, h_inf


def angle_points(Q: int, order: int) -> int:
    """Per-dimension angle grid size resolving kernels up to |p| <= (order + 1) Q."""
    return 2 * (order + 2) * Q + 2


def _difference_index(diff: np.ndarray, radius: int) -> np.ndarray:
    index = np.zeros(diff.shape[:-1], dtype=int)
    for c in range(diff.shape[-1]):
        index = index * (2 * radius + 1) + (diff[..., c] + radius)
    return index


def build_w0(hamiltonian, tangential: TangentialMap, lam: float, order: int) -> JetFunctional:
    """
    Jet of w_0(z) = lam * FT[d_x U(phi + Phi, J, z(phi))] about z = 0.

    Args:
        hamiltonian: Scaled perturbation evaluator (birkhoff.ScaledHamiltonian)
        tangential: Current (Phi, J)
        lam: Coupling lambda; kernels are linear in it
        order: Jet order M

    Returns:
        JetFunctional: Kernels c, L, B (and C for M = 3) on the normal space
    """
    trunc = tangential.trunc
    for m in range(2, order + 1):
        check_dense_size(trunc, m)
    jet = JetFunctional.zeros(trunc, order)
    if lam == 0.0:
        return jet

    d, Q = trunc.d, trunc.Q
    n_phi = angle_points(Q, order)
    phi = angle_grid(d, n_phi)
    theta = phi + synthesize(trunc.q_grid, tangential.phi, n_phi).real
    action = synthesize(trunc.q_grid, tangential.j, n_phi).real
    derivatives = hamiltonian.x_derivatives(theta, action, order)
    factor = hamiltonian.coupling(lam)

    n_q, n_z = trunc.n_q, trunc.n_z
    q = trunc.q_grid
    factorial = 1.0
    kernels = []
    for m, values in enumerate(derivatives):
        if m > 0:
            factorial *= m
        radius = (m + 1) * Q if m > 0 else Q
        diff_grid = box_grid(d, radius)
        hat = analyse(values * (factor / factorial), d, n_phi, diff_grid)
        kernels.append((radius, hat))

    jet.c = kernels[0][1].reshape(n_q * n_z)

    radius, hat = kernels[1]
    idx = _difference_index(q[:, None, :] - q[None, :, :], radius)
    jet.L = hat[idx].transpose(0, 2, 1, 3).reshape(n_q * n_z, n_q * n_z)

    if order >= 2:
        radius, hat = kernels[2]
        idx = _difference_index(q[:, None, None, :] - q[None, :, None, :] - q[None, None, :, :], radius)
        jet.B = hat[idx].transpose(0, 3, 1, 4, 2, 5).reshape((n_q * n_z,) * 3)

    if order >= 3:
        radius, hat = kernels[3]
        idx = _difference_index(q[:, None, None, None, :] - q[None, :, None, None, :]
                                - q[None, None, :, None, :] - q[None, None, None, :, :], radius)
        jet.C = hat[idx].transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape((n_q * n_z,) * 4)

    logger.debug(f"w0 jet built: order={order}, N={n_q * n_z}, |c|max={np.max(np.abs(jet.c)):.3e}")
    return jet
