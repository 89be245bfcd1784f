"""
Admissible frequencies: Diophantine conditions against renormalised clusters, their
dyadic-shell sufficient form, and Monte Carlo estimates of the excluded measure.
"""

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import stats

from utils.config import (CONFIDENCE_LEVEL, DEFAULT_DIOPH_CAP, DEFAULT_ETA, DEFAULT_MAX_LEVELS,
                          MEASURE_CHUNK)
from .clusters import ClusterLevel, cluster_decompose
from .errors import ParameterError
from .logger import Logger
from .mode_space import box_grid

logger = Logger().get_logger()

Interval = Tuple[float, float]


def default_nu(d: int, xi: float = 1.0) -> float:
    """d + 2 + ceil(2 / xi); comfortably above d + 1."""
    return float(d + 2 + math.ceil(2.0 / xi))


class DiophantineParams(BaseModel):
    """
    Constants of the frequency conditions.

    ``box`` is only needed for measure estimates; ``nu`` falls back to default_nu.
    """

    K: float = Field(ge=0.0)
    nu: Optional[float] = None
    eta: float = Field(default=DEFAULT_ETA, gt=0.0, lt=1.0)
    max_level: int = Field(default=DEFAULT_MAX_LEVELS, ge=1)
    box: List[Tuple[float, float]] = Field(default_factory=list)
    xi: float = Field(default=1.0, gt=0.0)
    cap: int = Field(default=DEFAULT_DIOPH_CAP, ge=1)

    @model_validator(mode="after")
    def _check_box(self) -> "DiophantineParams":
        for lo, hi in self.box:
            if not lo < hi:
                raise ValueError(f"box interval ({lo}, {hi}) is empty")
        return self

    def exponent(self, d: int) -> float:
        nu = self.nu if self.nu is not None else default_nu(d, self.xi)
        if nu <= d + 1:
            raise ParameterError(f"nu={nu} must exceed d + 1 = {d + 1}")
        return nu


class MembershipReport(BaseModel):
    member: bool
    level: Optional[int] = None
    cap_limited: bool = False
    witness: Optional[Dict[str, object]] = None


class MeasureRow(BaseModel):
    K: float
    excluded_fraction: float
    ci_low: float
    ci_high: float
    samples: int
    cap_limited_count: int


def merge_intervals(intervals: Sequence[Interval]) -> List[Interval]:
    merged: List[List[float]] = []
    for lo, hi in sorted(intervals):
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return [(lo, hi) for lo, hi in merged]


def condition_hulls(intervals: Sequence[Interval]) -> List[Interval]:
    """Merged hulls of C, C + C' and |C - C'| over all cluster pairs."""
    hulls = list(intervals)
    for i, (lo_a, hi_a) in enumerate(intervals):
        for lo_b, hi_b in intervals[i:]:
            hulls.append((lo_a + lo_b, hi_a + hi_b))
            low = max(0.0, lo_a - hi_b, lo_b - hi_a)
            hulls.append((low, max(hi_a - lo_b, hi_b - lo_a)))
    return merge_intervals(hulls)


def distance_to_union(values: np.ndarray, hulls: Sequence[Interval]) -> np.ndarray:
    """d(v, union of disjoint sorted intervals) for every v."""
    values = np.asarray(values, dtype=float)
    los = np.array([h[0] for h in hulls])
    his = np.array([h[1] for h in hulls])
    pos = np.searchsorted(los, values, side="right")
    left = np.clip(pos - 1, 0, len(los) - 1)
    right = np.clip(pos, 0, len(los) - 1)
    d_left = np.where(values > his[left], values - his[left], 0.0)
    d_left = np.where(values < los[left], los[left] - values, d_left)
    d_right = np.abs(los[right] - values)
    return np.minimum(d_left, d_right)


def _half_lattice(d: int, radius: int) -> np.ndarray:
    """One representative of every pair +-q with 0 < |q|_inf <= radius."""
    grid = box_grid(d, radius)
    return grid[len(grid) // 2 + 1:]


def _first_violation(omega: np.ndarray, q_set: np.ndarray, hulls: List[Interval],
                     K: float, nu: float) -> Optional[Dict[str, object]]:
    if len(q_set) == 0:
        return None
    kappa = np.abs(q_set @ omega)
    dist = distance_to_union(kappa, hulls)
    threshold = K * np.sum(np.abs(q_set), axis=1).astype(float) ** (-nu)
    bad = np.flatnonzero(dist <= threshold)
    if bad.size == 0:
        return None
    i = bad[np.argmin(dist[bad] / threshold[bad])]
    near = min(hulls, key=lambda h: float(distance_to_union(np.array([kappa[i]]), [h])[0]))
    return {"q": q_set[i].tolist(), "omega_dot_q": float(kappa[i]), "hull": list(near),
            "distance": float(dist[i]), "threshold": float(threshold[i])}


def _level_range(d: int, n: int, params: DiophantineParams, K: float,
                 nu: float) -> Tuple[np.ndarray, bool]:
    """Half-lattice q with 0 < |q|_1 < K eta^(-n/nu) and |q|_inf <= cap, plus the cap flag."""
    radius = K * params.eta ** (-n / nu)
    reach = min(params.cap, int(math.ceil(radius)))
    if reach < 1:
        return np.zeros((0, d), dtype=int), False
    q_set = _half_lattice(d, reach)
    return q_set[np.sum(np.abs(q_set), axis=1) < radius], radius > params.cap


def omega_n_member(omega: Sequence[float], level: ClusterLevel,
                   params: DiophantineParams) -> MembershipReport:
    """
    Test omega against the level-n conditions for 0 < |q|_1 < K eta^(-n/nu).

    The enumeration stops at |q|_inf <= cap; larger theoretical ranges are flagged.
    For K < 1 the range is empty until eta^(-n/nu) exceeds 1/K, so early levels pass
    every omega.
    """
    omega = np.asarray(omega, dtype=float)
    nu = params.exponent(len(omega))
    q_set, cap_limited = _level_range(len(omega), level.n, params, params.K, nu)

    hulls = condition_hulls([c.interval for c in level.clusters])
    witness = _first_violation(omega, q_set, hulls, params.K, nu)
    if witness is not None:
        witness["level"] = level.n
        logger.debug(f"omega={omega.tolist()} excluded at level {level.n}: {witness}")
    return MembershipReport(member=witness is None, level=level.n if witness else None,
                            cap_limited=cap_limited, witness=witness)


def omega_star_member(omega: Sequence[float], history: Sequence[ClusterLevel],
                      params: DiophantineParams) -> MembershipReport:
    """Conjunction of omega_n_member over levels 1..max_level; reports the first failure."""
    cap_limited = False
    for level in history:
        if level.n == 0 or level.n > params.max_level:
            continue
        report = omega_n_member(omega, level, params)
        cap_limited = cap_limited or report.cap_limited
        if not report.member:
            report.cap_limited = cap_limited
            return report
    return MembershipReport(member=True, cap_limited=cap_limited)


def sigma_star_member(omega: Sequence[float], level: ClusterLevel,
                      params: DiophantineParams) -> MembershipReport:
    """
    Sufficient condition on dyadic shells 2^(j-1) <= |q|_inf < 2^j with constant 2K.

    The last shell is extended to the cap.
    """
    omega = np.asarray(omega, dtype=float)
    nu = params.exponent(len(omega))
    hulls = condition_hulls([c.interval for c in level.clusters])
    q_set = _half_lattice(len(omega), params.cap)
    sup = np.max(np.abs(q_set), axis=1)
    shells = np.floor(np.log2(sup)).astype(int) + 1
    for shell in range(1, int(shells.max()) + 1):
        witness = _first_violation(omega, q_set[shells == shell], hulls, 2.0 * params.K, nu)
        if witness is not None:
            witness["shell"] = shell
            return MembershipReport(member=False, level=level.n, witness=witness)
    return MembershipReport(member=True)


def static_level(spectrum: Sequence[float], eta: float = DEFAULT_ETA, n: int = 0,
                 slots_by_k: Optional[Dict[int, np.ndarray]] = None) -> ClusterLevel:
    """
    Clusters of an unperturbed spectrum at level n.

    With ``slots_by_k`` every mode block is split on its own, as the RG does; without it the
    whole spectrum is one block.
    """
    values = np.asarray(spectrum, dtype=float)
    if slots_by_k is None:
        return cluster_decompose({0: np.sort(values)}, {0: np.arange(len(values))}, eta, n)
    blocks = {k: np.asarray(s) for k, s in slots_by_k.items() if len(s)}
    return cluster_decompose({k: values[s] for k, s in blocks.items()}, blocks, eta, n)


def static_history(spectrum: Sequence[float], slots_by_k: Dict[int, np.ndarray], eta: float,
                   levels: int) -> List[ClusterLevel]:
    """Unperturbed cluster levels 1..levels, one per RG level."""
    return [static_level(spectrum, eta, n, slots_by_k) for n in range(1, levels + 1)]


def _first_failures(points: np.ndarray, history: Sequence[ClusterLevel], params: DiophantineParams,
                    K: float, nu: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised omega_star_member over sample rows.

    Returns:
        Tuple[np.ndarray, np.ndarray]: First failing level per sample (0 when none), and
        whether the ranges up to that level were cap-limited
    """
    d = points.shape[1]
    failed_at = np.zeros(len(points), dtype=int)
    limited = np.zeros(len(points), dtype=bool)
    seen_cap = False
    for level in history:
        if level.n == 0 or level.n > params.max_level:
            continue
        q_set, cap_limited = _level_range(d, level.n, params, K, nu)
        seen_cap = seen_cap or cap_limited
        if len(q_set) == 0:
            continue
        hulls = condition_hulls([c.interval for c in level.clusters])
        threshold = K * np.sum(np.abs(q_set), axis=1).astype(float) ** (-nu)
        open_rows = np.flatnonzero(failed_at == 0)
        for start in range(0, len(open_rows), MEASURE_CHUNK):
            rows = open_rows[start:start + MEASURE_CHUNK]
            kappa = np.abs(points[rows] @ q_set.T)
            dist = distance_to_union(kappa.ravel(), hulls).reshape(kappa.shape)
            bad = rows[np.any(dist <= threshold[None, :], axis=1)]
            failed_at[bad] = level.n
            limited[bad] = seen_cap
    return failed_at, limited


def measure_estimate(params: DiophantineParams, history: Sequence[ClusterLevel], samples: int,
                     seed: int, K_grid: Sequence[float]) -> List[MeasureRow]:
    """
    Monte Carlo fraction of the box outside Omega*(K), per K.

    A sample is excluded when it fails omega_n_member with constant K at some level of
    ``history`` up to ``params.max_level``. Samples come from a Philox stream keyed by
    ``seed`` so estimates are reproducible.

    Returns:
        List[MeasureRow]: One row per K with a Wilson confidence interval
    """
    if not params.box:
        raise ParameterError("measure estimate needs a frequency box")
    d = len(params.box)
    nu = params.exponent(d)
    rng = np.random.Generator(np.random.Philox(seed))
    lows = np.array([lo for lo, _ in params.box])
    highs = np.array([hi for _, hi in params.box])
    points = lows + (highs - lows) * rng.random((samples, d))

    rows = []
    for K in K_grid:
        failed_at, limited = _first_failures(points, history, params, float(K), nu)
        excluded = failed_at > 0
        count = int(np.sum(excluded))
        ci = stats.binomtest(count, samples).proportion_ci(confidence_level=CONFIDENCE_LEVEL,
                                                           method="wilson")
        rows.append(MeasureRow(K=float(K), excluded_fraction=count / samples,
                               ci_low=float(ci.low), ci_high=float(ci.high), samples=samples,
                               cap_limited_count=int(np.sum(excluded & limited))))
        logger.info(f"K={K:.1e}: excluded {count}/{samples} ({count / samples:.4f})")
    return rows


def measure_slope(rows: Sequence[MeasureRow]) -> Optional[float]:
    """Log-log slope of excluded fraction against K over rows with both positive."""
    usable = [(r.K, r.excluded_fraction) for r in rows if r.K > 0 and r.excluded_fraction > 0]
    if len(usable) < 2:
        return None
    K, frac = np.log(np.array(usable)).T
    return float(stats.linregress(K, frac).slope)
