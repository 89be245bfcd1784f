"""
Tangential torus equation and the coupled tangential/normal fixed point.

For fixed normal part Z the corrections (Phi, J) solve, mode by mode,
    D J = -lam d_theta U,    -D Phi + g J = -lam d_I U,    D(q) = -i omega.q,
with U evaluated at theta = phi + Phi, I = J, x = Z(phi). The q = 0 block fixes
J(0) from the average equation and sets Phi(0) = 0.
"""

from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from utils.config import (COUPLED_DAMPING, COUPLED_MAX_ITERATIONS, COUPLED_TOLERANCE,
                          DEFAULT_SOBOLEV_WEIGHT, STALL_RATIO, STALL_TOLERANCE,
                          TANGENTIAL_MAX_ITERATIONS, TANGENTIAL_TOLERANCE)
from .diophantine import DiophantineParams
from .errors import ContractionError, InadmissibleFrequencyError, ParameterError
from .jets import JetFunctional
from .logger import Logger
from .mode_space import (FourierMap, TangentialMap, Truncation, analyse, angle_grid, synthesize,
                         translate, translate_tangential)
from .nlw_model import angle_points
from .verification import residual_fp

logger = Logger().get_logger()


class TangentialProblem:
    """
    Data of the tangential equation: frequencies, twist g = delta^4 gbar, coupling and
    the perturbation evaluator.

    Raises:
        ParameterError: The twist is singular
        InadmissibleFrequencyError: omega.q is too small at a stored q
    """

    def __init__(self, hamiltonian, trunc: Truncation, lam: Optional[float] = None,
                 dioph: Optional[DiophantineParams] = None) -> None:
        self.hamiltonian = hamiltonian
        self.trunc = trunc
        self.omega = np.asarray(hamiltonian.omega, dtype=float)
        self.g = np.asarray(hamiltonian.twist, dtype=float)
        self.lam = hamiltonian.lam if lam is None else float(lam)
        if abs(np.linalg.det(self.g)) == 0.0:
            raise ParameterError("twist matrix g is singular")
        self.n_phi = angle_points(trunc.Q, 2)
        self.phi = angle_grid(trunc.d, self.n_phi)
        self.kappa = trunc.frequencies(self.omega)
        self._check_divisors(dioph)

    def _check_divisors(self, dioph: Optional[DiophantineParams]) -> None:
        nonzero = np.arange(self.trunc.n_q) != self.trunc.zero_index
        if dioph is None or dioph.K == 0:
            bad = nonzero & (self.kappa == 0.0)
            threshold = np.zeros(self.trunc.n_q)
        else:
            nu = dioph.exponent(self.trunc.d)
            size = np.maximum(np.sum(np.abs(self.trunc.q_grid), axis=1), 1).astype(float)
            threshold = dioph.K * size ** (-nu)
            bad = nonzero & (np.abs(self.kappa) <= threshold)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            q = self.trunc.q_grid[i].tolist()
            raise InadmissibleFrequencyError(
                f"|omega.q| = {abs(self.kappa[i]):.3e} too small at q={q}",
                {"q": q, "omega_dot_q": float(self.kappa[i]), "threshold": float(threshold[i])})

    def forcing(self, y: TangentialMap, z: FourierMap) -> Tuple[np.ndarray, np.ndarray]:
        """Fourier coefficients of lam * d_theta U and lam * d_I U, each (n_q, d)."""
        trunc = self.trunc
        theta = self.phi + synthesize(trunc.q_grid, y.phi, self.n_phi).real
        action = synthesize(trunc.q_grid, y.j, self.n_phi).real
        x = synthesize(trunc.q_grid, z.coeffs, self.n_phi).real
        values = self.hamiltonian.evaluate(theta, action, x)
        factor = self.hamiltonian.coupling(self.lam)
        d_theta = analyse(factor * values.d_theta, trunc.d, self.n_phi, trunc.q_grid)
        d_action = analyse(factor * values.d_action, trunc.d, self.n_phi, trunc.q_grid)
        return d_theta, d_action

    def apply_block_inverse(self, d_theta: np.ndarray, d_action: np.ndarray) -> TangentialMap:
        """Solve [[0, D], [-D, g]] (Phi, J) = -(d_theta, d_action) mode by mode."""
        D = -1j * self.kappa[:, None]
        centre = self.trunc.zero_index
        safe = np.where(D == 0, 1.0, D)
        j = -d_theta / safe
        phi = (j @ self.g.T + d_action) / safe
        j[centre] = -np.linalg.solve(self.g, d_action[centre])
        phi[centre] = 0.0
        return TangentialMap(self.trunc, phi, j)

    def residual(self, y: TangentialMap, z: FourierMap) -> Tuple[float, float]:
        """(residual over the solvable equations, |mean of d_theta U|)."""
        d_theta, d_action = self.forcing(y, z)
        D = -1j * self.kappa[:, None]
        first = D * y.j + d_theta
        second = -D * y.phi + y.j @ self.g.T + d_action
        centre = self.trunc.zero_index
        average = float(np.linalg.norm(first[centre]))
        first[centre] = 0.0
        total = float(np.sum(np.linalg.norm(first, axis=1) + np.linalg.norm(second, axis=1)))
        return total, average

    def step_norm(self, delta: TangentialMap) -> float:
        """
        Size of a change in (Phi, J) with the mean action measured through g.

        J(0) solves g J(0) = -<d_I U>; its row counts as |g dJ(0)| / max(1, |g|).
        """
        centre = self.trunc.zero_index
        rest = np.arange(self.trunc.n_q) != centre
        mean_action = np.linalg.norm(self.g @ delta.j[centre]) / max(1.0, float(np.linalg.norm(self.g, 2)))
        return float(np.sum(np.linalg.norm(delta.phi, axis=1))
                     + np.sum(np.linalg.norm(delta.j[rest], axis=1)) + mean_action)

    def block_inverse_norm(self) -> float:
        """Largest spectral norm of the per-mode inverse over q != 0."""
        worst = 0.0
        d = self.trunc.d
        for i, kappa in enumerate(self.kappa):
            if i == self.trunc.zero_index:
                continue
            D = -1j * kappa * np.eye(d)
            block = np.block([[np.zeros((d, d)), D], [-D, self.g]])
            worst = max(worst, float(np.linalg.norm(np.linalg.inv(block), 2)))
        return worst


class TangentialResult(NamedTuple):
    y: TangentialMap
    iterations: int
    residual: float
    average_defect: float
    steps: List[float]


def _stalled(steps: Sequence[float], scale: float) -> bool:
    """The last step no longer contracts and already sits below the rounding tolerance."""
    if len(steps) < 2:
        return False
    return steps[-1] >= STALL_RATIO * steps[-2] and steps[-1] <= STALL_TOLERANCE * scale


def solve_tangential(problem: TangentialProblem, z: FourierMap,
                     start: Optional[TangentialMap] = None,
                     tol: float = TANGENTIAL_TOLERANCE) -> TangentialResult:
    """
    Chord iteration (Phi, J) <- block^-1 (-lam grad U(Phi, J, Z)).

    The block is frozen at the unperturbed twist, so this is not Newton: the error falls
    linearly, by a factor of order lam per step, instead of quadratically. Steps are measured
    with ``TangentialProblem.step_norm``. Once a step stops contracting below STALL_TOLERANCE
    the iterate is at the rounding floor of the forcing and is accepted.

    Raises:
        ContractionError: No convergence within TANGENTIAL_MAX_ITERATIONS
    """
    y = TangentialMap.zeros(problem.trunc) if start is None else start
    if problem.lam == 0.0:
        return TangentialResult(y, 0, 0.0, 0.0, [])
    steps: List[float] = []
    for iteration in range(1, TANGENTIAL_MAX_ITERATIONS + 1):
        update = problem.apply_block_inverse(*problem.forcing(y, z))
        steps.append(problem.step_norm(update - y))
        y = update
        scale = max(1.0, y.norm())
        if steps[-1] <= tol * scale or _stalled(steps, scale):
            residual, average = problem.residual(y, z)
            logger.debug(f"Tangential solve: {iteration} steps, last step {steps[-1]:.3e}, "
                         f"residual {residual:.3e}, average defect {average:.3e}")
            return TangentialResult(y, iteration, residual, average, steps)
    raise ContractionError(f"tangential iteration did not converge in {TANGENTIAL_MAX_ITERATIONS} steps",
                           {"step": steps[-1]})


def first_order_tangential(problem: TangentialProblem) -> TangentialMap:
    """d(Phi, J)/d lam at lam = 0: the block inverse applied to the unperturbed forcing."""
    saved = problem.lam
    problem.lam = 1.0
    try:
        forcing = problem.forcing(TangentialMap.zeros(problem.trunc), FourierMap.zeros(problem.trunc))
    finally:
        problem.lam = saved
    return problem.apply_block_inverse(*forcing)


def translate_solution(y: TangentialMap, z: FourierMap,
                       beta: Sequence[float]) -> Tuple[TangentialMap, FourierMap]:
    """
    The translated torus (Phi(. - beta) - beta, J(. - beta), Z(. - beta)).

    Translations map solutions to solutions with the same residual.
    """
    beta = np.asarray(beta, dtype=float)
    shifted = translate_tangential(y, beta)
    shifted.phi[y.trunc.zero_index] -= beta
    return shifted, translate(z, beta)


class CoupledResult(NamedTuple):
    y: TangentialMap
    z: FourierMap
    w0: JetFunctional
    iterations: int
    steps: List[float]
    residual: float
    contraction_rate: Optional[float]


NormalSolver = Callable[[TangentialMap], Tuple[FourierMap, JetFunctional]]


def coupled_solve(problem: TangentialProblem, normal_solver: NormalSolver,
                  mu: Sequence[float], damping: float = COUPLED_DAMPING,
                  tol: float = COUPLED_TOLERANCE, s: float = DEFAULT_SOBOLEV_WEIGHT) -> CoupledResult:
    """
    Alternate Y <- tangential(Z) and Z <- normal_solver(Y) until both stop moving.

    ``normal_solver`` returns the normal part and the w_0 jet it solved. After the steps settle
    Y is solved once more and Z, w_0 are rebuilt from it, so the returned triple and its
    residual belong together.

    Raises:
        ContractionError: The alternating iteration grows or runs out of iterations
    """
    trunc = problem.trunc
    z = FourierMap.zeros(trunc)
    y = TangentialMap.zeros(trunc)
    steps: List[float] = []
    for iteration in range(1, COUPLED_MAX_ITERATIONS + 1):
        tangential = solve_tangential(problem, z, start=y)
        candidate, w0 = normal_solver(tangential.y)
        new_z = FourierMap(trunc, (1.0 - damping) * z.coeffs + damping * candidate.coeffs, real=False)
        step = (new_z - z).norm(s) + problem.step_norm(tangential.y - y)
        y, z = tangential.y, new_z
        steps.append(step)
        logger.info(f"Coupled iteration {iteration}: step {step:.3e}")
        scale = max(1.0, z.norm(s) + y.norm())
        if step <= tol * scale or _stalled(steps, scale):
            final = solve_tangential(problem, z, start=y)
            z, w0 = normal_solver(final.y)
            residual = coupled_residual(problem, final.y, z, w0, mu, s)
            return CoupledResult(final.y, z, w0, iteration, steps, residual, contraction_rate(steps))
        if len(steps) >= 3 and steps[-1] > steps[-2] > steps[-3]:
            raise ContractionError("coupled iteration diverges; reduce lambda",
                                   {"steps": steps[-3:]})
    raise ContractionError(f"coupled iteration did not settle in {COUPLED_MAX_ITERATIONS} steps",
                           {"steps": steps[-3:]})


def coupled_residual(problem: TangentialProblem, y: TangentialMap, z: FourierMap,
                     w0: JetFunctional, mu: Sequence[float], s: float = DEFAULT_SOBOLEV_WEIGHT) -> float:
    """Tangential residual of (Y, Z) plus the normal fixed-point residual of Z against w_0."""
    tangential, _ = problem.residual(y, z)
    return tangential + residual_fp(z, problem.omega, mu, w0, s)


def contraction_rate(steps: Sequence[float]) -> Optional[float]:
    """Geometric mean of successive step ratios."""
    ratios = [b / a for a, b in zip(steps, steps[1:]) if a > 0 and b > 0]
    if not ratios:
        return None
    return float(np.exp(np.mean(np.log(ratios))))
