"""
Partial Birkhoff normal form of the tangential quartic Hamiltonian and the amplitude rescaling.
Polynomials live in the variables (w_1..w_d, wbar_1..wbar_d) of the internal field v = u / 4.
"""

import itertools
from collections import defaultdict
from functools import cached_property
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from utils.config import (
    BIRKHOFF_DIVISOR_FLOOR, REMAINDER_SAMPLES, SYMPLECTIC_PROBE_RADIUS,
)
from .errors import ExcludedPatternError, ParameterError, SmallDivisorError, TruncationError
from .logger import Logger
from .nlw_model import NLWModel, normal_frequency

logger = Logger().get_logger()

Exponent = Tuple[int, ...]


class Polynomial:
    """Sparse complex polynomial: exponent tuple -> coefficient."""

    def __init__(self, n_vars: int, terms: Optional[Dict[Exponent, complex]] = None) -> None:
        self.n_vars = n_vars
        self.terms: Dict[Exponent, complex] = {}
        for exponent, coef in (terms or {}).items():
            if coef != 0:
                self.terms[tuple(exponent)] = complex(coef)

    @classmethod
    def variable(cls, n_vars: int, index: int) -> "Polynomial":
        exponent = [0] * n_vars
        exponent[index] = 1
        return cls(n_vars, {tuple(exponent): 1.0})

    @classmethod
    def constant(cls, n_vars: int, value: complex) -> "Polynomial":
        return cls(n_vars, {(0,) * n_vars: value})

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    def coefficient(self, exponent: Sequence[int]) -> complex:
        return self.terms.get(tuple(exponent), 0.0)

    def __add__(self, other: "Polynomial") -> "Polynomial":
        out = dict(self.terms)
        for exponent, coef in other.terms.items():
            out[exponent] = out.get(exponent, 0.0) + coef
        return Polynomial(self.n_vars, out)

    def __neg__(self) -> "Polynomial":
        return self.scaled(-1.0)

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        return self + (-other)

    def scaled(self, factor: complex) -> "Polynomial":
        return Polynomial(self.n_vars, {e: c * factor for e, c in self.terms.items()})

    def multiply(self, other: "Polynomial", max_degree: Optional[int] = None) -> "Polynomial":
        out: Dict[Exponent, complex] = defaultdict(complex)
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                exponent = tuple(a + b for a, b in zip(e1, e2))
                if max_degree is not None and sum(exponent) > max_degree:
                    continue
                out[exponent] += c1 * c2
        return Polynomial(self.n_vars, out)

    def __mul__(self, other: "Polynomial") -> "Polynomial":
        return self.multiply(other)

    def homogeneous(self, degree: int) -> "Polynomial":
        return Polynomial(self.n_vars, {e: c for e, c in self.terms.items() if sum(e) == degree})

    def derivative(self, index: int) -> "Polynomial":
        out = {}
        for exponent, coef in self.terms.items():
            if exponent[index] == 0:
                continue
            lowered = list(exponent)
            lowered[index] -= 1
            out[tuple(lowered)] = coef * exponent[index]
        return Polynomial(self.n_vars, out)

    def evaluate(self, values: np.ndarray) -> np.ndarray:
        """values has shape (n_vars, P); returns shape (P,)."""
        values = np.asarray(values, dtype=complex)
        out = np.zeros(values.shape[1:], dtype=complex)
        for exponent, coef in self.terms.items():
            term = np.full(values.shape[1:], coef, dtype=complex)
            for index, power in enumerate(exponent):
                if power:
                    term = term * values[index] ** power
            out += term
        return out

    def compose(self, substitutions: List["Polynomial"], max_degree: int) -> "Polynomial":
        """self(sub_1, ..., sub_n) truncated at total degree ``max_degree``."""
        result = Polynomial(self.n_vars)
        powers: Dict[Tuple[int, int], "Polynomial"] = {}

        def power(index: int, p: int) -> "Polynomial":
            if (index, p) not in powers:
                if p == 0:
                    powers[(index, p)] = Polynomial.constant(self.n_vars, 1.0)
                else:
                    powers[(index, p)] = power(index, p - 1).multiply(substitutions[index], max_degree)
            return powers[(index, p)]

        for exponent, coef in self.terms.items():
            term = Polynomial.constant(self.n_vars, coef)
            for index, p in enumerate(exponent):
                if p:
                    term = term.multiply(power(index, p), max_degree)
            result = result + term
        return result

    def max_abs(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)


def is_resonant(exponent: Exponent, d: int) -> bool:
    """A monomial w^alpha wbar^beta is resonant iff alpha == beta."""
    return tuple(exponent[:d]) == tuple(exponent[d:])


def gbar_matrix(tangential_set: Sequence[int], m: float) -> np.ndarray:
    """gbar_ij = (3 / pi) (4 - delta_ij) / (mu_i mu_j)."""
    mu = np.array([normal_frequency(n, m) for n in tangential_set])
    d = len(mu)
    return (3.0 / np.pi) * (4.0 - np.eye(d)) / np.outer(mu, mu)


def small_divisor(modes: Sequence[int], signs: Sequence[int], m: float) -> float:
    """
    Signed sum of normal frequencies for a quartic monomial.

    Args:
        modes: Four tangential mode indices
        signs: +1 for w, -1 for wbar, one per mode
        m: Mass

    Returns:
        float: sum of sign * mu_n; its ratio to m / (N^2 + m)^(3/2) is logged
    """
    balance: Dict[int, int] = defaultdict(int)
    for n, s in zip(modes, signs):
        balance[abs(n)] += s
    if all(v == 0 for v in balance.values()):
        raise ExcludedPatternError(f"resonant pattern {tuple(modes)} with signs {tuple(signs)}",
                                   {"modes": list(modes), "signs": list(signs)})
    value = float(sum(s * normal_frequency(n, m) for n, s in zip(modes, signs)))
    big_n = max(abs(n) for n in modes)
    ratio = abs(value) / (m / (big_n ** 2 + m) ** 1.5)
    logger.debug(f"Divisor {tuple(modes)}{tuple(signs)} = {value:.6f}, ratio to bound scale {ratio:.3f}")
    return value


class DivisorEntry(BaseModel):
    exponent: List[int]
    divisor: float
    bound_ratio: float


class NormalFormData(BaseModel):
    gbar: List[List[float]]
    F_coeffs: List[Dict[str, object]]
    divisors: List[DivisorEntry]
    remainder_norm: float
    nonresonant_residual: float
    resonant_defect: float
    symplectic_defect: float
    min_divisor: Optional[float]


class BirkhoffNormalForm:
    """
    Removes nonresonant quartic terms of the tangential Hamiltonian with a degree-4 generator.

    The flow convention is w' = w + i dF/dwbar, wbar' = wbar - i dF/dw.
    """

    def __init__(self, model: NLWModel) -> None:
        self.model = model
        self.d = model.d
        self.n_vars = 2 * self.d
        self.mu = model.tangential_mu
        self.c3 = model.cfg.f_coeffs[0] if model.cfg.f_coeffs else 0.0

    def _var(self, index: int) -> Polynomial:
        return Polynomial.variable(self.n_vars, index)

    @cached_property
    def quadratic(self) -> Polynomial:
        """Lambda_d = sum mu_j w_j wbar_j."""
        out = Polynomial(self.n_vars)
        for j in range(self.d):
            out = out + (self._var(j) * self._var(self.d + j)).scaled(self.mu[j])
        return out

    @cached_property
    def quartic(self) -> Polynomial:
        """G_d = 4 c_3 sum g q q q q with q_j = (w_j + wbar_j) / sqrt(2 mu_j) (internal field)."""
        positions = [(self._var(j) + self._var(self.d + j)).scaled(1.0 / np.sqrt(2.0 * self.mu[j]))
                     for j in range(self.d)]
        tensor = self.model.quartic_tensor
        out = Polynomial(self.n_vars)
        for key in itertools.product(range(self.d), repeat=4):
            g = tensor[[self.model.tangential[j] for j in key]]
            if g == 0.0:
                continue
            term = Polynomial.constant(self.n_vars, 4.0 * self.c3 * g)
            for j in key:
                term = term * positions[j]
            out = out + term
        return out

    def divisor_of(self, exponent: Exponent) -> float:
        alpha = np.array(exponent[:self.d])
        beta = np.array(exponent[self.d:])
        return float(np.dot(self.mu, alpha - beta))

    @cached_property
    def generator(self) -> Polynomial:
        """F with F_e = g_e / (i divisor_e) on nonresonant monomials."""
        out = {}
        for exponent, coef in self.quartic.terms.items():
            if is_resonant(exponent, self.d):
                continue
            divisor = self.divisor_of(exponent)
            if abs(divisor) < BIRKHOFF_DIVISOR_FLOOR:
                raise SmallDivisorError(f"divisor {divisor:.3e} for monomial {exponent}",
                                        {"exponent": list(exponent), "divisor": divisor})
            out[exponent] = coef / (1j * divisor)
        return Polynomial(self.n_vars, out)

    @cached_property
    def flow(self) -> List[Polynomial]:
        """Degree-4 jet of the time-1 map, one polynomial per variable."""
        F = self.generator
        out = []
        for j in range(self.d):
            out.append(self._var(j) + F.derivative(self.d + j).scaled(1j))
        for j in range(self.d):
            out.append(self._var(self.d + j) + F.derivative(j).scaled(-1j))
        return out

    @cached_property
    def flow_jacobian(self) -> List[List[Polynomial]]:
        return [[component.derivative(c) for c in range(self.n_vars)] for component in self.flow]

    @cached_property
    def transformed_quartic(self) -> Polynomial:
        """Degree-4 part of (Lambda_d + G_d) composed with the flow."""
        total = (self.quadratic + self.quartic).compose(self.flow, 4)
        return total.homogeneous(4)

    def gbar_from_transform(self) -> np.ndarray:
        """gbar_ii = 2 coef(|w_i|^4), gbar_ij = coef(|w_i|^2 |w_j|^2)."""
        d = self.d
        gbar = np.zeros((d, d))
        for i in range(d):
            for j in range(d):
                exponent = [0] * self.n_vars
                exponent[i] += 1
                exponent[j] += 1
                exponent[d + i] += 1
                exponent[d + j] += 1
                coef = self.transformed_quartic.coefficient(exponent).real
                gbar[i, j] = 2.0 * coef if i == j else coef
        return gbar

    def nonresonant_residual(self) -> float:
        return max((abs(c) for e, c in self.transformed_quartic.terms.items()
                    if not is_resonant(e, self.d)), default=0.0)

    def apply_flow(self, w: np.ndarray) -> np.ndarray:
        """Evaluate the flow jet at w (shape (d, P)); wbar is taken as conj(w)."""
        values = np.concatenate([w, np.conj(w)], axis=0)
        return np.stack([p.evaluate(values) for p in self.flow])

    def jacobian(self, values: np.ndarray) -> np.ndarray:
        """Jacobian of the flow at points of shape (2d, P); returns (2d, 2d, P)."""
        return np.stack([np.stack([p.evaluate(values) for p in row]) for row in self.flow_jacobian])

    def symplectic_defect(self, samples: int = 16, seed: int = 0) -> float:
        """Max degree-2 part of J^T Omega J - Omega at random points with |w| = probe radius."""
        rng = np.random.default_rng(seed)
        d = self.d
        omega_form = np.zeros((self.n_vars, self.n_vars), dtype=complex)
        omega_form[:d, d:] = 1j * np.eye(d)
        omega_form[d:, :d] = -1j * np.eye(d)

        def defect(values: np.ndarray) -> np.ndarray:
            jac = np.moveaxis(self.jacobian(values), -1, 0)
            return np.einsum("pji,jk,pkl->pil", jac, omega_form, jac) - omega_form

        raw = rng.normal(size=(d, samples)) + 1j * rng.normal(size=(d, samples))
        w = SYMPLECTIC_PROBE_RADIUS * raw / np.linalg.norm(raw, axis=0)
        values = np.concatenate([w, np.conj(w)], axis=0)
        degree_two = (16.0 * defect(values) - defect(2.0 * values)) / 12.0
        return float(np.max(np.abs(degree_two)))

    def normal_form_energy(self, w: np.ndarray, gbar: np.ndarray) -> np.ndarray:
        """Lambda_d(w) + 1/2 sum gbar_ij |w_i|^2 |w_j|^2."""
        actions = np.abs(w) ** 2
        return self.mu @ actions + 0.5 * np.einsum("ip,ij,jp->p", actions, gbar, actions)

    def remainder_norm(self, radius: float = SYMPLECTIC_PROBE_RADIUS,
                       samples: int = REMAINDER_SAMPLES, seed: int = 1) -> float:
        """Sampled size of H_d(flow(w)) - normal form at |w| = radius (degree >= 6 terms)."""
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(self.d, samples)) + 1j * rng.normal(size=(self.d, samples))
        w = radius * raw / np.linalg.norm(raw, axis=0)
        image = self.apply_flow(w)
        exact = (self.quadratic + self.quartic).evaluate(image).real
        return float(np.max(np.abs(exact - self.normal_form_energy(w, self.gbar_from_transform()))))

    def divisor_table(self) -> List[DivisorEntry]:
        entries = []
        big_n = max(abs(n) for n in self.model.tangential)
        scale = self.model.m / (big_n ** 2 + self.model.m) ** 1.5
        for exponent in sorted(self.quartic.terms):
            if is_resonant(exponent, self.d):
                continue
            divisor = self.divisor_of(exponent)
            entries.append(DivisorEntry(exponent=list(exponent), divisor=divisor,
                                        bound_ratio=abs(divisor) / scale))
        return entries

    def transform(self) -> NormalFormData:
        gbar = self.gbar_from_transform()
        reference = gbar_matrix(self.model.tangential, self.model.m) * self.c3
        divisors = self.divisor_table()
        data = NormalFormData(
            gbar=gbar.tolist(),
            F_coeffs=[{"exponent": list(e), "re": c.real, "im": c.imag}
                      for e, c in sorted(self.generator.terms.items())],
            divisors=divisors,
            remainder_norm=self.remainder_norm(),
            nonresonant_residual=self.nonresonant_residual(),
            resonant_defect=float(np.max(np.abs(gbar - reference))),
            symplectic_defect=self.symplectic_defect(),
            min_divisor=min((abs(e.divisor) for e in divisors), default=None),
        )
        logger.info(f"Normal form: d={self.d}, {len(data.F_coeffs)} generator terms, "
                    f"nonresonant residual {data.nonresonant_residual:.2e}, "
                    f"symplectic defect {data.symplectic_defect:.2e}")
        return data


def birkhoff_transform(model: NLWModel) -> NormalFormData:
    return BirkhoffNormalForm(model).transform()


def modulated_frequencies(a: Sequence[float], tangential_set: Sequence[int], m: float) -> np.ndarray:
    """omega_i = mu_{n_i} + sum_j gbar_ij a_j^2."""
    a = np.asarray(a, dtype=float)
    mu = np.array([normal_frequency(n, m) for n in tangential_set])
    return mu + gbar_matrix(tangential_set, m) @ (a ** 2)


def amplitudes_for(omega: Sequence[float], tangential_set: Sequence[int], m: float) -> np.ndarray:
    """Inverse of modulated_frequencies on the cone where every a_j^2 is positive."""
    mu = np.array([normal_frequency(n, m) for n in tangential_set])
    squares = np.linalg.solve(gbar_matrix(tangential_set, m), np.asarray(omega, dtype=float) - mu)
    if np.any(squares <= 0):
        raise ParameterError(f"omega={list(omega)} lies outside the modulation cone",
                             {"a_squared": squares.tolist()})
    return np.sqrt(squares)


class PerturbationValues(NamedTuple):
    U: np.ndarray
    d_theta: np.ndarray
    d_action: np.ndarray
    d_x: np.ndarray


class ScaledHamiltonian:
    """
    Evaluator of the rescaled perturbation U~(theta, I, x) = delta^-4 U_a(theta, delta^4 I, delta^2 x).

    U_a = Lambda_d(flow w) - Lambda_d(w) + G_v(u) - Gbar_d(w) with
    w_j = sqrt(I_j + a_j^2) exp(-i theta_j) and u built from the flowed
    tangential modes plus the normal coordinates x.
    """

    def __init__(self, model: NLWModel, normal_form: BirkhoffNormalForm,
                 amplitudes: Sequence[float], lam: Optional[float] = None) -> None:
        self.model = model
        self.normal_form = normal_form
        self.a = np.asarray(amplitudes, dtype=float)
        if self.a.shape != (model.d,) or np.any(self.a <= 0):
            raise ParameterError(f"amplitudes must be {model.d} positive numbers, got {list(self.a)}")
        self.delta = float(np.linalg.norm(self.a))
        self.lam = self.delta if lam is None else float(lam)
        self.gbar = normal_form.gbar_from_transform()
        self.mu = model.tangential_mu
        self.omega = self.mu + self.gbar @ self.a ** 2
        self.twist = self.delta ** 4 * self.gbar
        self.d = model.d
        basis = model.basis
        self.psi_t = basis.psi[:, model.tangential_columns]
        self.psi_n = basis.psi[:, model.normal_columns]
        self.f = model.scaled_nonlinearity

    def coupling(self, lam: float) -> float:
        """Factor turning gradients of U~ into those of lam * U~ / delta."""
        return lam / self.delta

    def _angles_to_w(self, theta: np.ndarray, action: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        squares = self.delta ** 4 * np.asarray(action, dtype=float) + self.a ** 2
        if np.any(squares < 0):
            raise TruncationError("action correction leaves the torus neighbourhood")
        w = (np.sqrt(squares) * np.exp(-1j * np.asarray(theta, dtype=float))).T
        return w, squares.T

    def _field(self, image: np.ndarray, x: Optional[np.ndarray]) -> np.ndarray:
        """Internal field on the x grid, shape (P, n_x)."""
        d = self.d
        positions = ((image[:d] + image[d:]) / np.sqrt(2.0 * self.mu)[:, None]).real
        u = positions.T @ self.psi_t.T
        if x is not None:
            u = u + (self.delta ** 2 * np.asarray(x, dtype=float)) @ self.psi_n.T
        return u

    def tangential_positions(self, theta: np.ndarray, action: np.ndarray) -> np.ndarray:
        """q_{n_i} of the flowed tangential modes, shape (P, d)."""
        w, _ = self._angles_to_w(theta, action)
        image = self.normal_form.apply_flow(w)
        return ((image[:self.d] + image[self.d:]) / np.sqrt(2.0 * self.mu)[:, None]).real.T

    def tangential_momenta(self, theta: np.ndarray, action: np.ndarray) -> np.ndarray:
        """p_{n_i} = -i (w' - wbar') sqrt(mu / 2), shape (P, d)."""
        w, _ = self._angles_to_w(theta, action)
        image = self.normal_form.apply_flow(w)
        return (-1j * (image[:self.d] - image[self.d:]) * np.sqrt(self.mu / 2.0)[:, None]).real.T

    def evaluate(self, theta: np.ndarray, action: np.ndarray, x: np.ndarray) -> PerturbationValues:
        """U~ and its gradients at points (P, d), (P, d), (P, n_z)."""
        d = self.d
        w, squares = self._angles_to_w(theta, action)
        values = np.concatenate([w, np.conj(w)], axis=0)
        image = np.stack([p.evaluate(values) for p in self.normal_form.flow])
        u = self._field(image, x)
        weight = self.model.basis.weight

        G = weight * np.sum(self.f.g(u), axis=1)
        force = weight * self.f.f(u)
        lam_image = np.sum(self.mu[:, None] * image[:d] * image[d:], axis=0)
        lam_w = np.sum(self.mu[:, None] * squares, axis=0)
        gbar_w = 0.5 * np.einsum("ip,ij,jp->p", squares, self.gbar, squares)
        U = (lam_image - lam_w + G - gbar_w).real

        # gradient in the flowed variables (w', wbar')
        dG_dq = (force @ self.psi_t).T / np.sqrt(2.0 * self.mu)[:, None]
        grad_image = np.concatenate([self.mu[:, None] * image[d:] + dG_dq,
                                     self.mu[:, None] * image[:d] + dG_dq], axis=0)
        jac = self.normal_form.jacobian(values)
        grad = np.einsum("rp,rcp->cp", grad_image, jac)
        modulation = self.mu[:, None] + self.gbar @ squares
        grad[:d] -= modulation * values[d:]
        grad[d:] -= modulation * values[:d]

        d_theta = (grad[:d] * (-1j * values[:d]) + grad[d:] * (1j * values[d:])).real
        d_action = ((grad[:d] * values[:d] + grad[d:] * values[d:]) / (2.0 * squares)).real
        d_x = force @ self.psi_n

        scale = self.delta ** -4
        return PerturbationValues(U=scale * U, d_theta=(scale * d_theta).T, d_action=d_action.T,
                                  d_x=self.delta ** -2 * d_x)

    def x_derivatives(self, theta: np.ndarray, action: np.ndarray, order: int) -> List[np.ndarray]:
        """[D_x U~, D_x^2 U~, ...] up to D_x^{order+1} at x = 0, on the given points."""
        w, _ = self._angles_to_w(theta, action)
        values = np.concatenate([w, np.conj(w)], axis=0)
        image = np.stack([p.evaluate(values) for p in self.normal_form.flow])
        u = self._field(image, None)
        weight = self.model.basis.weight
        psi = self.psi_n
        out = []
        for m in range(order + 1):
            profile = weight * self.f.derivatives[m](u) * self.delta ** (2 * m - 2)
            if m == 0:
                out.append(profile @ psi)
            elif m == 1:
                out.append(np.einsum("px,xa,xb->pab", profile, psi, psi))
            elif m == 2:
                out.append(np.einsum("px,xa,xb,xc->pabc", profile, psi, psi, psi))
            else:
                out.append(np.einsum("px,xa,xb,xc,xe->pabce", profile, psi, psi, psi, psi))
        return out


def rescale_hamiltonian(delta: float, normal_form: BirkhoffNormalForm,
                        direction: Optional[Sequence[float]] = None,
                        lam: Optional[float] = None) -> ScaledHamiltonian:
    """Amplitude vector delta * direction / |direction|; the effective coupling defaults to delta."""
    if delta <= 0:
        raise ParameterError(f"delta must be positive, got {delta}")
    d = normal_form.d
    direction = np.ones(d) if direction is None else np.asarray(direction, dtype=float)
    return ScaledHamiltonian(normal_form.model, normal_form, delta * direction / np.linalg.norm(direction), lam)
