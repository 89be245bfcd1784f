"""
Independent checks of a computed torus: fixed-point residuals, the Lindstedt series,
reconstruction of u(x, t), PDE residuals and direct time integration.
Nothing here calls the RG iteration.
"""

import itertools
from typing import Any, Dict, List, NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel

from utils.config import (AMPLITUDE_SCALE, DEFAULT_SOBOLEV_WEIGHT, FD_COARSE_RATIO,
                          LINDSTEDT_DIVISOR_FLOOR, LINDSTEDT_MAX_ORDER, STABILITY_THRESHOLD)
from .errors import ParameterError, SmallDivisorError, StepSizeError
from .jets import JetFunctional
from .logger import Logger
from .mode_space import DiagonalKernel, FourierMap, TangentialMap, angle_grid, flat_weighted_norm
from .nlw_model import Nonlinearity, basis_value, normal_frequency

logger = Logger().get_logger()


class TorusSolution:
    """
    A computed torus: frequencies, tangential corrections (Phi, J), normal part z and
    the renormalised frequencies of every slot.
    """

    def __init__(self, omega: Sequence[float], lam: float, amplitudes: Sequence[float],
                 tangential: TangentialMap, z: FourierMap, mu_normal: Sequence[float],
                 residual: float, levels: int, converged: bool = True) -> None:
        self.omega = np.asarray(omega, dtype=float)
        self.lam = float(lam)
        self.amplitudes = np.asarray(amplitudes, dtype=float)
        self.tangential = tangential
        self.z = z
        self.mu_normal = np.asarray(mu_normal, dtype=float)
        self.residual = float(residual)
        self.levels = int(levels)
        self.converged = bool(converged)

    @property
    def trunc(self):
        return self.z.trunc

    def to_json(self) -> Dict[str, Any]:
        return {"omega": self.omega.tolist(), "lambda": self.lam,
                "amplitudes": self.amplitudes.tolist(),
                "mu_tangential": self.omega.tolist(), "mu_normal": self.mu_normal.tolist(),
                "residual": self.residual, "levels": self.levels, "converged": self.converged,
                "z": self.z.to_json(), "tangential": self.tangential.to_json()}

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "TorusSolution":
        z = FourierMap.from_json(data["z"])
        tangential = TangentialMap.from_json(z.trunc, data["tangential"])
        return cls(data["omega"], data["lambda"], data["amplitudes"], tangential, z,
                   data["mu_normal"], data["residual"], data["levels"], data.get("converged", True))


def residual_fp(z: FourierMap, omega: Sequence[float], mu: Sequence[float], w0: JetFunctional,
                s: float = DEFAULT_SOBOLEV_WEIGHT) -> float:
    """||K_0 z - w_0(z)||_s."""
    z.trunc.check_same(w0.trunc)
    k0 = DiagonalKernel.free(z.trunc, np.asarray(omega, dtype=float), np.asarray(mu, dtype=float))
    vector = z.flat()
    return flat_weighted_norm(z.trunc, k0.apply_flat(vector) - w0(vector), s)


def _compositions(total: int, parts: int):
    """Ordered tuples of ``parts`` positive integers summing to ``total``."""
    if total < parts:
        return
    for cut in itertools.combinations(range(1, total), parts - 1):
        bounds = (0,) + cut + (total,)
        yield tuple(b - a for a, b in zip(bounds, bounds[1:]))


def lindstedt_expand(order: int, w_hat: JetFunctional, omega: Sequence[float],
                     mu: Sequence[float]) -> List[np.ndarray]:
    """
    Coefficients z_1..z_order of the solution of K_0 z = lam * w_hat(z) as a power series in lam.

    z_p = K_0^-1 sum over m and compositions (i_1..i_m) of p - 1 of w_hat^(m)(z_i1, ..., z_im).

    Raises:
        SmallDivisorError: A denominator vanishes where the right side does not
    """
    if not 1 <= order <= LINDSTEDT_MAX_ORDER:
        raise ParameterError(f"Lindstedt order must be in 1..{LINDSTEDT_MAX_ORDER}, got {order}")
    trunc = w_hat.trunc
    symbol = (trunc.frequencies(omega)[:, None] ** 2 - np.asarray(mu, dtype=float)[None, :] ** 2).reshape(-1)
    terms: List[np.ndarray] = []
    for p in range(1, order + 1):
        rhs = w_hat.c.copy() if p == 1 else np.zeros(trunc.size, dtype=complex)
        for (i,) in _compositions(p - 1, 1):
            rhs += w_hat.L @ terms[i - 1]
        if w_hat.B is not None:
            for i, j in _compositions(p - 1, 2):
                rhs += w_hat.quadratic(terms[i - 1], terms[j - 1])
        if w_hat.C is not None:
            for i, j, k in _compositions(p - 1, 3):
                rhs += w_hat.cubic(terms[i - 1], terms[j - 1], terms[k - 1])
        small = (np.abs(symbol) < LINDSTEDT_DIVISOR_FLOOR) & (np.abs(rhs) > 0)
        if np.any(small):
            index = int(np.flatnonzero(small)[0])
            q = trunc.q_grid[index // trunc.n_z].tolist()
            raise SmallDivisorError(f"vanishing Lindstedt denominator at q={q}, slot {index % trunc.n_z}",
                                    {"q": q, "slot": index % trunc.n_z, "order": p})
        safe = np.where(np.abs(symbol) < LINDSTEDT_DIVISOR_FLOOR, 1.0, symbol)
        terms.append(np.where(np.abs(symbol) < LINDSTEDT_DIVISOR_FLOOR, 0.0, rhs / safe))
    return terms


def lindstedt_sum(terms: Sequence[np.ndarray], lam: float) -> np.ndarray:
    return sum(lam ** (p + 1) * t for p, t in enumerate(terms))


# Reconstruction of the physical field

def _series_at(coeffs: np.ndarray, q_grid: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """F(phi) = sum_q f(q) exp(-i q.phi) at angle rows ``phases`` (P, d)."""
    return (np.exp(-1j * (phases @ q_grid.T)) @ coeffs).real


def torus_coordinates(sol: TorusSolution, hamiltonian, phases: np.ndarray):
    """(theta, J, x, dx/dt) of the torus at angle rows ``phases``."""
    q_grid = sol.trunc.q_grid
    theta = phases + _series_at(sol.tangential.phi, q_grid, phases)
    action = _series_at(sol.tangential.j, q_grid, phases)
    x = _series_at(sol.z.coeffs, q_grid, phases)
    rate = -1j * (q_grid @ sol.omega)[:, None] * sol.z.coeffs
    x_dot = _series_at(rate, q_grid, phases)
    return theta, action, x, x_dot


def torus_state(sol: TorusSolution, hamiltonian, times: Sequence[float]):
    """
    Physical mode vectors (q, p) over modes -N..N along the torus orbit phi = omega t.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Shapes (T, 2N + 1)
    """
    model = hamiltonian.model
    phases = np.outer(np.asarray(times, dtype=float), sol.omega)
    theta, action, x, x_dot = torus_coordinates(sol, hamiltonian, phases)
    n_modes = len(model.basis.modes)
    q = np.zeros((len(phases), n_modes))
    p = np.zeros_like(q)
    scale = AMPLITUDE_SCALE
    delta2 = hamiltonian.delta ** 2
    q[:, model.tangential_columns] = scale * hamiltonian.tangential_positions(theta, action)
    p[:, model.tangential_columns] = scale * hamiltonian.tangential_momenta(theta, action)
    q[:, model.normal_columns] = scale * delta2 * x
    p[:, model.normal_columns] = scale * delta2 * x_dot
    return q, p


def reconstruct_u(sol: TorusSolution, hamiltonian, x: Sequence[float],
                  times: Sequence[float]) -> np.ndarray:
    """
    u(x, t) in physical units, shape (len(times), len(x)).

    Unwinds the rescaling, the normal-form flow, the action-angle variables and the
    amplitude scale of the internal field.
    """
    model = hamiltonian.model
    x = np.asarray(x, dtype=float)
    q, _ = torus_state(sol, hamiltonian, times)
    psi = np.stack([basis_value(int(n), x) for n in model.basis.modes], axis=1)
    return q @ psi.T


def leading_amplitudes(sol: TorusSolution, hamiltonian, points: int = 64) -> np.ndarray:
    """
    Effective a_i read off the first Fourier coefficient of each tangential position.

    A tangential mode carrying a cos(theta) has physical amplitude 4 sqrt(2 / mu) a.
    """
    d = len(sol.omega)
    phases = angle_grid(d, points)
    theta, action, _, _ = torus_coordinates(sol, hamiltonian, phases)
    positions = AMPLITUDE_SCALE * hamiltonian.tangential_positions(theta, action)
    out = np.empty(d)
    for i in range(d):
        coefficient = np.mean(positions[:, i] * np.exp(1j * phases[:, i]))
        out[i] = 2.0 * abs(coefficient) / (AMPLITUDE_SCALE * np.sqrt(2.0 / hamiltonian.mu[i]))
    return out


class FrequencyReport(BaseModel):
    measured_shift: List[float]
    predicted_shift: List[float]
    effective_amplitudes: List[float]
    defect: float


def frequency_shift_check(sol: TorusSolution, hamiltonian) -> FrequencyReport:
    """Compare omega - mu with gbar a_eff^2."""
    a_eff = leading_amplitudes(sol, hamiltonian)
    measured = sol.omega - hamiltonian.mu
    predicted = hamiltonian.gbar @ a_eff ** 2
    return FrequencyReport(measured_shift=measured.tolist(), predicted_shift=predicted.tolist(),
                           effective_amplitudes=a_eff.tolist(),
                           defect=float(np.max(np.abs(measured - predicted))))


class PDEResidualReport(BaseModel):
    residual: float
    signal: float
    fd_gap: float
    coarse: bool


def pde_residual(u: np.ndarray, dt: float, m: float, f_coeffs: Sequence[float]) -> PDEResidualReport:
    """
    sup |u_tt - u_xx + m u + f(u)| for u sampled on uniform x in [0, 2 pi) and uniform t.

    u_xx is spectral; u_tt uses the five-point fourth-order stencil on interior times.
    The grid is flagged coarse when the fourth- and second-order stencils disagree by more
    than a tenth of the signal.
    """
    u = np.asarray(u, dtype=float)
    if u.shape[0] < 5:
        raise ParameterError("pde_residual needs at least five time samples")
    k = np.fft.fftfreq(u.shape[1], 1.0 / u.shape[1])
    u_xx = np.fft.ifft(-(k ** 2) * np.fft.fft(u, axis=1), axis=1).real
    centre = u[2:-2]
    u_tt = (-u[4:] + 16.0 * u[3:-1] - 30.0 * centre + 16.0 * u[1:-3] - u[:-4]) / (12.0 * dt ** 2)
    coarse_tt = (u[3:-1] - 2.0 * centre + u[1:-3]) / dt ** 2
    f = Nonlinearity(f_coeffs).f
    residual = u_tt - u_xx[2:-2] + m * centre + f(centre)
    signal = float(np.max(np.abs(u_tt), initial=0.0))
    gap = float(np.max(np.abs(u_tt - coarse_tt), initial=0.0))
    coarse = gap > FD_COARSE_RATIO * signal if signal > 0 else False
    if coarse:
        logger.warning(f"Time grid too coarse: stencil gap {gap:.3e} vs signal {signal:.3e}")
    return PDEResidualReport(residual=float(np.max(np.abs(residual), initial=0.0)), signal=signal,
                             fd_gap=gap, coarse=coarse)


def residual_slope(amplitudes: Sequence[float], residuals: Sequence[float]) -> float:
    """Least-squares slope of log residual against log amplitude."""
    return float(np.polyfit(np.log(amplitudes), np.log(residuals), 1)[0])


# Direct integration

class Trajectory(NamedTuple):
    times: np.ndarray
    q: np.ndarray
    p: np.ndarray
    energy: np.ndarray

    @property
    def energy_drift(self) -> float:
        scale = max(abs(float(self.energy[0])), 1e-300)
        return float(np.max(np.abs(self.energy - self.energy[0])) / scale)


def integrate_direct(model, q0: np.ndarray, p0: np.ndarray, T: float, dt: float,
                     sample_every: int = 1) -> Trajectory:
    """
    Strang splitting of q'' = -mu^2 q - dG/dq: exact half rotations around a full kick.

    Raises:
        StepSizeError: dt * max(mu) at or above the stability threshold
    """
    mu = model.all_mu
    if dt <= 0 or dt * float(np.max(mu)) >= STABILITY_THRESHOLD:
        raise StepSizeError(f"dt={dt} unstable for mu_max={np.max(mu):.3f}",
                            {"dt": dt, "mu_max": float(np.max(mu))})
    steps = int(round(T / dt))
    cos_h, sin_h = np.cos(0.5 * dt * mu), np.sin(0.5 * dt * mu)

    def rotate(q: np.ndarray, p: np.ndarray):
        return q * cos_h + p * sin_h / mu, -q * mu * sin_h + p * cos_h

    q = np.asarray(q0, dtype=float).copy()
    p = np.asarray(p0, dtype=float).copy()
    times, qs, ps = [0.0], [q.copy()], [p.copy()]
    for step in range(1, steps + 1):
        q, p = rotate(q, p)
        p = p - dt * model.force(q)
        q, p = rotate(q, p)
        if step % sample_every == 0:
            times.append(step * dt)
            qs.append(q.copy())
            ps.append(p.copy())
    qs_arr, ps_arr = np.array(qs), np.array(ps)
    trajectory = Trajectory(np.array(times), qs_arr, ps_arr, model.hamiltonian(qs_arr, ps_arr))
    logger.info(f"Integrated {steps} steps to T={T}: relative energy drift {trajectory.energy_drift:.3e}")
    return trajectory


def zero_crossing_frequency(times: np.ndarray, signal: np.ndarray) -> float:
    """Angular frequency from the mean spacing of linearly interpolated zero crossings."""
    signal = np.asarray(signal, dtype=float)
    idx = np.flatnonzero(np.signbit(signal[:-1]) != np.signbit(signal[1:]))
    if len(idx) < 2:
        raise ParameterError("fewer than two zero crossings")
    crossings = times[idx] - signal[idx] * (times[idx + 1] - times[idx]) / (signal[idx + 1] - signal[idx])
    return float(np.pi / np.mean(np.diff(crossings)))


class TrackingReport(BaseModel):
    times: List[float]
    deviation: List[float]
    energy_drift: float

    @property
    def max_deviation(self) -> float:
        return max(self.deviation) if self.deviation else 0.0


def torus_deviation(sol: TorusSolution, hamiltonian, T: float, dt: float,
                    samples: int = 50) -> TrackingReport:
    """Sup over modes of |q_direct(t) - q_torus(t)| at ``samples`` times in [0, T]."""
    every = max(1, int(round(T / dt)) // samples)
    q0, p0 = torus_state(sol, hamiltonian, [0.0])
    trajectory = integrate_direct(hamiltonian.model, q0[0], p0[0], T, dt, every)
    q_torus, _ = torus_state(sol, hamiltonian, trajectory.times)
    deviation = np.max(np.abs(trajectory.q - q_torus), axis=1)
    return TrackingReport(times=trajectory.times.tolist(), deviation=deviation.tolist(),
                          energy_drift=trajectory.energy_drift)


def linear_solution(n: int, m: float, amplitude: float, x: np.ndarray, times: np.ndarray) -> np.ndarray:
    """a cos(mu_n t) psi_n(x), an exact solution when f vanishes."""
    mu = normal_frequency(n, m)
    return amplitude * np.cos(mu * np.asarray(times))[:, None] * basis_value(n, np.asarray(x))[None, :]
