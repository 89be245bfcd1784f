"""
Renormalisation-group iteration for the normal equation K_0 z = w_0(z).

Each level integrates out the modes that stay away from the current resonant clusters,
renormalises the normal frequencies by the diagonal part of the effective map, and
composes the change of variables so that z_n = F_n(0) approximates the solution.
"""

from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from utils.config import (CONTRACTION_LIMIT, DEFAULT_ETA, DEFAULT_JET_ORDER, DEFAULT_MAX_LEVELS,
                          DEFAULT_SOBOLEV_WEIGHT, DIAGONAL_NEGLIGIBLE, GAMMA_SYMBOL_SAMPLES,
                          HERMITICITY_WARN, LINEARITY_PROBE, PICARD_MAX_ITERATIONS,
                          PICARD_TOLERANCE, PROJECTOR_TOLERANCE, SINGULAR_CONDITION)
from .clusters import (ClusterKey, ClusterLevel, build_projectors, cluster_decompose, cutoff, drift,
                       nesting_defect, projector_algebra_defect, resonant_sets, root_level)
from .diophantine import DiophantineParams, omega_n_member
from .errors import ContractionError, InadmissibleFrequencyError, SmallDivisorError
from .jets import JetFunctional
from .logger import Logger
from .mode_space import (DiagonalKernel, FourierMap, KernelTag, Truncation, flat_weighted_norm)
from .verification import residual_fp

logger = Logger().get_logger()


class RGParams(BaseModel):
    eta: float = Field(default=DEFAULT_ETA, gt=0.0, lt=1.0)
    max_levels: int = Field(default=DEFAULT_MAX_LEVELS, ge=1)
    order: int = Field(default=DEFAULT_JET_ORDER, ge=1, le=3)
    s: float = DEFAULT_SOBOLEV_WEIGHT
    picard_tol: float = Field(default=PICARD_TOLERANCE, gt=0.0)
    contraction_limit: float = Field(default=CONTRACTION_LIMIT, gt=0.0, le=1.0)
    tolerance: float = Field(default=0.0, ge=0.0)
    diophantine: Optional[DiophantineParams] = None


class LevelDiagnostics(BaseModel):
    """Everything measured at one RG level; written to the per-level JSON."""

    n: int
    clusters: List[Dict[str, object]]
    resonant_counts: Dict[str, int]
    gamma_norm: float
    contraction: float
    picard_iterations: int
    a_norm: float
    a_hermiticity: float
    min_mu_squared: float
    mu_step: float
    z_norm: float
    z_step: float
    residual: float
    identity_residual: float
    identity_scale: float
    commuted_residual: float
    chain_defect: float
    algebra_defect: float
    nesting_defect: float
    sibling_gap: float
    drift: float
    reality: float
    symm1: float
    symm2: float
    resonant_constant: float
    resonant_derivative: float
    linearity_ratio: float
    jet_tail: float
    cap_limited: bool = False


class RSolution(NamedTuple):
    change: JetFunctional      # y(z) = z + R(z)
    image: JetFunctional       # w~(y(z))
    contraction: float
    iterations: int


# Jet composition. ``inner`` is a map z -> y(z) stored as a jet of the same order.

def _pull_back2(kernel: np.ndarray, T: np.ndarray) -> np.ndarray:
    out = np.tensordot(kernel, T, axes=([1], [0]))
    return np.tensordot(out, T, axes=([1], [0]))


def _pull_back3(kernel: np.ndarray, T: np.ndarray) -> np.ndarray:
    out = np.tensordot(kernel, T, axes=([1], [0]))
    out = np.tensordot(out, T, axes=([1], [0]))
    return np.tensordot(out, T, axes=([1], [0]))


def _zeros_like_order(trunc: Truncation, m: int) -> np.ndarray:
    return np.zeros((trunc.size,) * (m + 1), dtype=complex)


def compose_jets(outer: JetFunctional, inner: JetFunctional) -> JetFunctional:
    """Jet of z -> outer(inner(z)) truncated at outer.order."""
    trunc, order = outer.trunc, outer.order
    shifted = outer.recentred(inner.c)
    T = inner.L
    L = shifted.L @ T
    B = C = None
    if order >= 2:
        inner_B = inner.B if inner.B is not None else _zeros_like_order(trunc, 2)
        B = np.tensordot(shifted.L, inner_B, axes=([1], [0])) + _pull_back2(shifted.B, T)
    if order >= 3:
        inner_C = inner.C if inner.C is not None else _zeros_like_order(trunc, 3)
        Y = np.tensordot(np.tensordot(shifted.B, T, axes=([1], [0])), inner_B, axes=([1], [0]))
        mixed = (2.0 / 3.0) * (Y + Y.transpose(0, 2, 1, 3) + Y.transpose(0, 2, 3, 1))
        C = np.tensordot(shifted.L, inner_C, axes=([1], [0])) + mixed + _pull_back3(shifted.C, T)
    return JetFunctional(trunc, order, shifted.c, L, B, C)


def add_linear_image(jet: JetFunctional, matrix: np.ndarray, inner: JetFunctional) -> JetFunctional:
    """jet(z) + matrix @ inner(z)."""
    out = jet.copy()
    out.c = out.c + matrix @ inner.c
    out.L = out.L + matrix @ inner.L
    if out.B is not None and inner.B is not None:
        out.B = out.B + np.tensordot(matrix, inner.B, axes=([1], [0]))
    if out.C is not None and inner.C is not None:
        out.C = out.C + np.tensordot(matrix, inner.C, axes=([1], [0]))
    return out


def identity_jet(trunc: Truncation, order: int) -> JetFunctional:
    jet = JetFunctional.zeros(trunc, order)
    jet.L = np.eye(trunc.size, dtype=complex)
    return jet


# Single-level operators

def gamma_operator(Kn: DiagonalKernel, Q_n: DiagonalKernel, P_prev: DiagonalKernel,
                   level: int = 0) -> DiagonalKernel:
    """
    Gamma_n(q) = K_n(q)^-1 Q_n(q) P_{n-1}(q), zero wherever Q_n P_{n-1} vanishes.

    K_n(q) is only inverted on the range of Q_n(q) P_{n-1}(q): with U an orthonormal
    basis of that range the block is U (U^H K_n U)^-1 U^H Q_n P_{n-1}. A resonance in a
    slot the projectors annihilate does not reach the solve.

    Raises:
        SmallDivisorError: The compressed block has condition number above 1e12
    """
    trunc = Kn.trunc
    weights = Q_n.compose(P_prev).blocks
    blocks = np.zeros_like(weights)
    for i in range(trunc.n_q):
        u, sigma, _ = np.linalg.svd(weights[i])
        rank = int(np.count_nonzero(sigma > PROJECTOR_TOLERANCE * max(1.0, float(sigma[0]))))
        if rank == 0:
            continue
        U = u[:, :rank]
        compressed = U.conj().T @ Kn.blocks[i] @ U
        condition = np.linalg.cond(compressed)
        if not np.isfinite(condition) or condition > SINGULAR_CONDITION:
            q = trunc.q_grid[i].tolist()
            raise SmallDivisorError(f"K_{level}(q={q}) near-singular on the Q P range "
                                    f"(cond {condition:.3e})",
                                    {"q": q, "level": level, "condition": float(condition),
                                     "rank": rank})
        blocks[i] = U @ np.linalg.solve(compressed, U.conj().T @ weights[i])
    return DiagonalKernel(trunc, blocks, KernelTag.GAMMA)


def solve_R(jet: JetFunctional, gamma: DiagonalKernel, tol: float = PICARD_TOLERANCE,
            contraction_limit: float = CONTRACTION_LIMIT) -> RSolution:
    """
    Solve R(z) = Gamma w~(z + R(z)) as a jet.

    R(0) comes from Picard iteration; with L_0 = Dw~(R(0)) and H = (1 - Gamma L_0)^-1
    the linear part of z + R(z) is H and every higher kernel is H Gamma applied to
    the matching part of w~ composed with the lower-order change of variables.

    Raises:
        ContractionError: ||Gamma Dw~(0)|| at or above ``contraction_limit``, or Picard stalls
    """
    trunc, order = jet.trunc, jet.order
    G = gamma.as_matrix()
    contraction = float(np.linalg.norm(G @ jet.L, 2)) if jet.L.any() else 0.0
    if contraction >= contraction_limit:
        raise ContractionError(f"||Gamma Dw|| = {contraction:.3f} >= {contraction_limit}; "
                               f"reduce lambda", {"contraction": contraction})

    r0 = G @ jet.c
    iterations = 0
    for iterations in range(1, PICARD_MAX_ITERATIONS + 1):
        update = G @ jet(r0)
        step = float(np.max(np.abs(update - r0), initial=0.0))
        r0 = update
        if step <= tol * max(1.0, float(np.max(np.abs(r0), initial=0.0))):
            break
    else:
        raise ContractionError(f"Picard iteration for R(0) stalled after {iterations} steps",
                               {"step": step})

    L0 = jet.derivative(r0)
    H = np.linalg.inv(np.eye(trunc.size) - G @ L0)
    HG = H @ G

    change = JetFunctional.zeros(trunc, order)
    change.c = r0
    change.L = H
    if order >= 2:
        change.B = np.tensordot(HG, compose_jets(jet, change).B, axes=([1], [0]))
    if order >= 3:
        change.C = np.tensordot(HG, compose_jets(jet, change).C, axes=([1], [0]))
    image = compose_jets(jet, change)
    logger.debug(f"R solved: contraction={contraction:.3e}, Picard steps={iterations}")
    return RSolution(change, image, contraction, iterations)


def extract_A(jet: JetFunctional, level: ClusterLevel, omega: np.ndarray,
              sets: Dict[ClusterKey, np.ndarray]) -> Tuple[DiagonalKernel, np.ndarray, float]:
    """
    Diagonal part of Dw_n(0) projected on every cluster eigenspace.

    Each cluster is read at the resonant q with omega.q > 0 closest to its centre.
    A(q) is a on omega.q > 0, conj(a) on omega.q < 0 and Re(a) at omega.q = 0.

    Returns:
        Tuple: (A_n kernel, hermitian a_n on the slot space, worst raw hermiticity defect)
    """
    trunc = jet.trunc
    n_z = trunc.n_z
    sigma = jet.diagonal_blocks()
    kappa = trunc.frequencies(omega)
    a = np.zeros((n_z, n_z), dtype=complex)
    raw_defect = 0.0

    for c in level.clusters:
        V = c.embedded_basis(n_z)
        members = sets.get(c.key, np.zeros(0, dtype=int))
        positive = members[kappa[members] > 0]
        if positive.size == 0:
            size = float(np.max(np.abs(np.conj(V.T)[None] @ sigma @ V[None]), initial=0.0))
            if size > DIAGONAL_NEGLIGIBLE:
                logger.warning(f"Cluster {c.key}: no resonant q to read the diagonal "
                               f"(|sigma| {size:.2e}); block left at 0")
            continue
        i = positive[np.argmin(np.abs(kappa[positive] - c.centre))]
        block = np.conj(V.T) @ sigma[i] @ V
        defect = float(np.max(np.abs(block - np.conj(block.T)), initial=0.0))
        raw_defect = max(raw_defect, defect)
        a += V @ (0.5 * (block + np.conj(block.T))) @ np.conj(V.T)

    if raw_defect > HERMITICITY_WARN:
        logger.warning(f"Level {level.n}: raw diagonal block hermiticity defect {raw_defect:.2e}")

    blocks = np.zeros((trunc.n_q, n_z, n_z), dtype=complex)
    blocks[kappa > 0] = a
    blocks[kappa < 0] = np.conj(a)
    blocks[kappa == 0] = a.real
    return DiagonalKernel(trunc, blocks, KernelTag.AN), a, raw_defect


class RGState:
    """
    Mutable state of the iteration after level n.

    Holds the renormalised frequencies, the cluster history, the current effective map
    w~_n, the accumulated changes of variables F_n and G_n, and the iterates z_n.
    """

    def __init__(self, trunc: Truncation, omega: Sequence[float], mu: Sequence[float],
                 w0: JetFunctional, eta: float = DEFAULT_ETA) -> None:
        trunc.check_same(w0.trunc)
        self.trunc = trunc
        self.omega = np.asarray(omega, dtype=float)
        self.mu = np.asarray(mu, dtype=float)
        self.eta = eta
        self.n = 0
        self.k0 = DiagonalKernel.free(trunc, self.omega, self.mu)
        self.w0 = w0
        self.slots_by_k = {k: trunc.slots_of(k) for k in range(trunc.Kmax + 1)
                           if len(trunc.slots_of(k))}
        self.mu_squared = {k: np.diag(self.mu[s] ** 2).astype(complex) for k, s in self.slots_by_k.items()}
        self.levels: List[ClusterLevel] = [root_level(trunc, eta, self.mu)]
        self.sets: Optional[Dict[ClusterKey, np.ndarray]] = None
        self.kernel = self.k0
        self.P = DiagonalKernel.identity(trunc)
        self.A = DiagonalKernel.zeros(trunc, KernelTag.AN)
        self.A_total = DiagonalKernel.zeros(trunc, KernelTag.AN)
        self.a_history: List[np.ndarray] = [np.zeros((trunc.n_z, trunc.n_z), dtype=complex)]
        self.jet = w0.copy()
        self.F = identity_jet(trunc, w0.order)
        self.G = JetFunctional.zeros(trunc, w0.order)
        self.iterates: List[FourierMap] = [FourierMap.zeros(trunc)]
        self.gamma_norms: Dict[int, float] = {}
        self.diagnostics: List[LevelDiagnostics] = []

    @property
    def z(self) -> FourierMap:
        return self.iterates[-1]

    def mu_tilde(self) -> Dict[int, np.ndarray]:
        """Sorted renormalised frequencies per block."""
        return {k: np.sqrt(np.linalg.eigvalsh(block)) for k, block in self.mu_squared.items()}

    def gamma_continuity(self, n: int, p: Sequence[int],
                         samples: int = GAMMA_SYMBOL_SAMPLES) -> "GammaContinuityReport":
        return gamma_continuity_check(self.levels, self.a_history, self.mu, self.slots_by_k,
                                      n, self.omega, p, samples)


def _mu_step(before: Dict[int, np.ndarray], after: Dict[int, np.ndarray]) -> float:
    return float(max(np.max(np.abs(after[k] - before[k]), initial=0.0) for k in before))


def _probe(trunc: Truncation, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(n))
    raw = rng.standard_normal((trunc.n_q, trunc.n_z)) + 1j * rng.standard_normal((trunc.n_q, trunc.n_z))
    vector = FourierMap(trunc, raw).flat()
    return vector / max(float(np.max(np.abs(vector))), 1e-300)


def rg_step(state: RGState, params: RGParams) -> RGState:
    """
    Advance the iteration by one level.

    Raises:
        InadmissibleFrequencyError: omega fails the level's Diophantine conditions
        SmallDivisorError: A block of K_n cannot be inverted where Gamma_n needs it
        ContractionError: The R equation is not a contraction
    """
    trunc, omega, s = state.trunc, state.omega, params.s
    n = state.n + 1
    parents = state.levels[-1]
    mu_before = state.mu_tilde()

    level = cluster_decompose(state.mu_squared, state.slots_by_k, params.eta, n, parents)
    cap_limited = False
    if params.diophantine is not None:
        report = omega_n_member(omega, level, params.diophantine)
        cap_limited = report.cap_limited
        if not report.member:
            raise InadmissibleFrequencyError(f"omega fails the level-{n} conditions", report.witness)
    sets = resonant_sets(omega, level, trunc, state.sets, parents)
    P, Q, P_hat = build_projectors(level, omega, trunc)

    Kn = state.kernel - state.P.compose(state.A)
    gamma = gamma_operator(Kn, Q, state.P, n)
    solution = solve_R(state.jet, gamma, params.picard_tol, params.contraction_limit)
    change, w_n = solution.change, solution.image

    F = compose_jets(state.F, change)
    G = add_linear_image(compose_jets(state.G, change), state.A.as_matrix(), change)
    z = FourierMap.from_flat(trunc, F.c, real=False)

    A, a, raw_defect = extract_A(w_n, level, omega, sets)
    jet = w_n.subtract_diagonal(A.blocks)

    # Limit identity K_0 z_n - Q_n w_0(z_n) = P_n G_n(0), exact up to jet truncation
    w0_z = state.w0(z.flat())
    lhs = state.k0.apply_flat(z.flat()) - Q.apply_flat(w0_z)
    identity = flat_weighted_norm(trunc, lhs - P.apply_flat(G.c), s)
    k0_size = float(np.max(np.abs(state.k0.blocks), initial=0.0))
    identity_scale = k0_size * z.norm(s) + flat_weighted_norm(trunc, w0_z, s)
    A_below = state.A_total + state.A
    commuted = flat_weighted_norm(trunc, lhs - A_below.apply_flat(P.apply_flat(change.c)), s)

    for k, slots in state.slots_by_k.items():
        state.mu_squared[k] = state.mu_squared[k] + a[np.ix_(slots, slots)]
    mu_after = state.mu_tilde()
    min_mu_squared = min(float(np.linalg.eigvalsh(b)[0]) for b in state.mu_squared.values())
    if min_mu_squared <= 0:
        raise ContractionError(f"renormalised mu^2 lost positivity at level {n}",
                               {"level": n, "min_eigenvalue": min_mu_squared})

    P_hat_matrix = P_hat.as_matrix()
    probe = _probe(trunc, n)
    z_size = z.norm(s)
    linearity = 0.0
    if z_size > 0:
        dz = probe * LINEARITY_PROBE * z_size
        linear = P_hat_matrix @ (w_n.L @ dz)
        nonlinear = P_hat_matrix @ (w_n(dz) - w_n.c - w_n.L @ dz)
        denominator = flat_weighted_norm(trunc, linear, s)
        linearity = flat_weighted_norm(trunc, nonlinear, s) / denominator if denominator > 0 else 0.0
    dz = probe * params.eta ** (n + 1)
    tail = flat_weighted_norm(trunc, w_n(dz) - (state.w0(F(dz)) - G(dz)), s)

    diag = LevelDiagnostics(
        n=n, clusters=level.table(),
        resonant_counts={f"{k[0]},{k[1]}": int(len(v)) for k, v in sets.items()},
        gamma_norm=gamma.operator_norm(), contraction=solution.contraction,
        picard_iterations=solution.iterations,
        a_norm=float(np.linalg.norm(a, 2)), a_hermiticity=raw_defect,
        min_mu_squared=min_mu_squared, mu_step=_mu_step(mu_before, mu_after),
        z_norm=z_size, z_step=(z - state.z).norm(s),
        residual=residual_fp(z, omega, state.mu, state.w0, s),
        identity_residual=identity, identity_scale=identity_scale, commuted_residual=commuted,
        chain_defect=float(np.max(np.abs(P.compose(state.P).blocks - P.blocks), initial=0.0)),
        algebra_defect=projector_algebra_defect(level, trunc.n_z),
        nesting_defect=nesting_defect(level, parents, trunc.n_z),
        sibling_gap=level.sibling_gap(), drift=drift(level, state.levels),
        reality=z.reality_defect(), symm1=w_n.reality_defect(), symm2=w_n.transpose_defect(),
        resonant_constant=flat_weighted_norm(trunc, P_hat_matrix @ w_n.c, s),
        resonant_derivative=float(np.linalg.norm(P_hat_matrix @ jet.L, 2)),
        linearity_ratio=linearity, jet_tail=tail, cap_limited=cap_limited)

    state.n = n
    state.levels.append(level)
    state.sets = sets
    state.kernel = Kn
    state.P = P
    state.A_total = A_below
    state.A = A
    state.a_history.append(a)
    state.jet = jet
    state.F, state.G = F, G
    state.iterates.append(z)
    state.gamma_norms[n] = diag.gamma_norm
    state.diagnostics.append(diag)
    logger.info(f"Level {n}: {len(level.clusters)} clusters, |Gamma|={diag.gamma_norm:.3e}, "
                f"contraction={diag.contraction:.3e}, |a|={diag.a_norm:.3e}, "
                f"|z_n - z_n-1|={diag.z_step:.3e}, residual={diag.residual:.3e}")
    return state


def run_rg(trunc: Truncation, omega: Sequence[float], mu: Sequence[float], w0: JetFunctional,
           params: RGParams, stop_event=None) -> RGState:
    """
    Iterate rg_step up to ``params.max_levels``.

    Stops early once the effective map vanishes, the step falls below ``params.tolerance``
    or ``stop_event`` is set.
    """
    state = RGState(trunc, omega, mu, w0, params.eta)
    for _ in range(params.max_levels):
        if stop_event is not None and stop_event.is_set():
            logger.warning(f"Stop requested; keeping {state.n} levels")
            break
        rg_step(state, params)
        if state.jet.is_zero():
            logger.info(f"Effective map vanished at level {state.n}")
            break
        if params.tolerance > 0 and state.n > 1 and state.diagnostics[-1].z_step <= params.tolerance:
            logger.info(f"Converged at level {state.n}")
            break
    return state


# Continuous-symbol diagnostics for Gamma_n

class GammaContinuityReport(BaseModel):
    n: int
    shift: float
    gamma_norm: float
    delta_norm: float
    slope: Optional[float] = None
    points: int


def _symbol_projector(level: ClusterLevel, kappa: float, n_z: int) -> np.ndarray:
    if level.n == 0:
        return np.eye(n_z, dtype=complex)
    out = np.zeros((n_z, n_z), dtype=complex)
    for c in level.clusters:
        chi = float(cutoff(kappa, c.interval, level.eta, level.n))
        if chi:
            out += chi * c.projector(n_z)
    return out


def gamma_symbol(levels: Sequence[ClusterLevel], a_history: Sequence[np.ndarray],
                 mu: np.ndarray, n: int, kappa: float) -> Optional[np.ndarray]:
    """Gamma_n at a real kappa = omega.q; None where the block is numerically singular."""
    n_z = len(mu)
    P_prev = _symbol_projector(levels[n - 1], kappa, n_z)
    weight = (np.eye(n_z) - _symbol_projector(levels[n], kappa, n_z)) @ P_prev
    if not np.any(np.abs(weight) > 0.0):
        return np.zeros((n_z, n_z), dtype=complex)
    K = np.diag(kappa ** 2 - mu ** 2).astype(complex)
    for m in range(1, n):
        a = a_history[m] if kappa > 0 else (np.conj(a_history[m]) if kappa < 0 else a_history[m].real)
        K -= _symbol_projector(levels[m], kappa, n_z) @ a
    if np.linalg.cond(K) > SINGULAR_CONDITION:
        return None
    return np.linalg.solve(K, weight)


def gamma_continuity_check(levels: Sequence[ClusterLevel], a_history: Sequence[np.ndarray],
                           mu: np.ndarray, slots_by_k: Dict[int, np.ndarray], n: int,
                           omega: np.ndarray, p: Sequence[int],
                           samples: int = GAMMA_SYMBOL_SAMPLES) -> GammaContinuityReport:
    """
    sup ||Gamma_n(kappa)|| and sup ||Gamma_n(kappa + omega.p) - Gamma_n(kappa)|| over the
    windows where Q_n P_{n-1} can be nonzero.
    """
    mu = np.asarray(mu, dtype=float)
    shift = float(np.dot(np.asarray(omega, dtype=float), np.asarray(p, dtype=float)))
    width = 0.25 * levels[n - 1].eta ** (n - 1)
    gamma_norm = delta_norm = 0.0
    points = 0
    for c in levels[n - 1].clusters:
        lo, hi = c.interval
        for kappa in np.linspace(max(lo - width, 0.0), hi + width, samples):
            here = gamma_symbol(levels, a_history, mu, n, float(kappa))
            if here is None:
                continue
            points += 1
            gamma_norm = max(gamma_norm, float(np.linalg.norm(here, 2)))
            if shift == 0.0:
                continue
            there = gamma_symbol(levels, a_history, mu, n, float(kappa) + shift)
            if there is not None:
                delta_norm = max(delta_norm, float(np.linalg.norm(there - here, 2)))
    slope = delta_norm / abs(shift) if shift != 0.0 else None
    return GammaContinuityReport(n=n, shift=shift, gamma_norm=gamma_norm, delta_norm=delta_norm,
                                 slope=slope, points=points)


def fit_gamma_exponent(norms: Dict[int, float], eta: float) -> float:
    """Slope of log ||Gamma_n|| against n log(1/eta)."""
    levels = sorted(k for k, v in norms.items() if v > 0)
    x = np.array(levels, dtype=float) * np.log(1.0 / eta)
    y = np.log(np.array([norms[k] for k in levels]))
    return float(np.polyfit(x, y, 1)[0])
