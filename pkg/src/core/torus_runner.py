"""
Run orchestration for the four commands: solve, measure, verify and normal-form.

Each command resolves the configuration into model objects, runs the pipeline, writes its
artefacts and a run record, and maps domain errors onto exit codes.
"""

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from utils.config import (COUPLED_TOLERANCE, DIVISORS_FILE, EXIT_OK, FREQUENCY_SHIFT_TOLERANCE,
                          LEVELS_FILE, LINDSTEDT_TAIL_FACTOR, MEASURE_FILE, NORMAL_FORM_FILE,
                          PDE_SLOPE_MIN, PDE_TIME_SAMPLES, RESIDUALS_FILE, RUN_LOG_FILE,
                          SOLUTION_FILE, TRACKING_SAMPLES, VERIFY_FILE)
from utils.config_parser import RunConfig
from .birkhoff import BirkhoffNormalForm, ScaledHamiltonian, amplitudes_for
from .diophantine import DiophantineParams, measure_estimate, measure_slope, static_history
from .errors import ConfigError, SmallDivisorError, TorusError, VerificationError
from .jets import JetFunctional
from .logger import Logger
from .mode_space import FourierMap, TangentialMap, flat_weighted_norm
from .nlw_model import NLWConfig, NLWModel, build_w0, check_hypotheses
from .rg_core import RGParams, RGState, fit_gamma_exponent, run_rg
from .run_records import RunRecord, content_hash, file_hash, read_json, write_csv, write_json
from .tangential_kam import TangentialProblem, coupled_solve, solve_tangential
from .verification import (TorusSolution, frequency_shift_check, lindstedt_expand, lindstedt_sum,
                           pde_residual, reconstruct_u, residual_fp, residual_slope,
                           torus_deviation)

logger = Logger().get_logger()

RESIDUAL_COLUMNS = ["n", "z_norm", "z_step", "residual", "identity_residual", "commuted_residual",
                    "gamma_norm", "contraction", "a_norm", "mu_step", "jet_tail"]
MEASURE_COLUMNS = ["K", "excluded_fraction", "ci_low", "ci_high", "samples", "cap_limited_count"]


class SolveOutcome(NamedTuple):
    solution: TorusSolution
    hamiltonian: ScaledHamiltonian
    state: Optional[RGState]
    coupled_steps: List[float]


def renormalised_slots(state: RGState) -> np.ndarray:
    """Renormalised normal frequencies laid out by slot, ascending inside each k block."""
    out = state.mu.copy()
    for k, slots in state.slots_by_k.items():
        out[slots] = state.mu_tilde()[k]
    return out


class TorusRunner:
    """
    Builds the model from a RunConfig and runs one command.

    ``stop()`` may be called from a signal handler; the RG loop checks the flag between levels.
    """

    def __init__(self, config: RunConfig, config_text: str, out_dir: Optional[Path] = None) -> None:
        self.config = config
        self.config_text = config_text
        self.out_dir = Path(out_dir if out_dir is not None else config.output.dir)
        self.should_stop = threading.Event()
        self.record: Optional[RunRecord] = None

        model_block = config.model
        try:
            self.nlw_config = NLWConfig(m=model_block.m, f_coeffs=tuple(model_block.f),
                                        tangential_set=tuple(model_block.tangential),
                                        space_cutoff=model_block.space_cutoff, s=model_block.s)
        except ValueError as error:
            raise ConfigError(str(error), key="model") from error

    def stop(self) -> None:
        logger.warning("Stop requested; finishing the current level")
        self.should_stop.set()

    # Command dispatch

    def run(self, command: str, **kwargs: Any) -> int:
        """
        Run ``command`` and return its exit code.

        Domain errors are logged, recorded and converted; artefacts already written stay.
        """
        handlers: Dict[str, Callable[..., Dict[str, Any]]] = {
            "solve": self.solve, "measure": self.measure,
            "verify": self.verify, "normal-form": self.normal_form,
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        log_handler = Logger().add_file_handler(str(self.out_dir / RUN_LOG_FILE))
        Logger().log_system_info()

        self.record = RunRecord(command=command, config=self.config.echo(),
                                input_hash=content_hash(self.config_text))
        self.record.inputs["config"] = self.record.input_hash
        start = time.time()
        exit_code, error = EXIT_OK, None
        try:
            self.record.summary = handlers[command](**kwargs)
        except TorusError as exc:
            logger.error(f"{command} failed: {exc}")
            exit_code, error = exc.exit_code, exc
        finally:
            elapsed = time.time() - start
            self.record.finish(exit_code, elapsed, error)
            self.record.write(self.out_dir)
            Logger().log_performance_metrics(len(self.record.artefacts), elapsed)
            Logger().remove_handler(log_handler)
        return exit_code

    def _written(self, path: Path) -> None:
        if self.record is not None:
            self.record.add_artefact(path)

    # Model assembly

    def _model(self) -> NLWModel:
        return NLWModel(self.nlw_config, self.config.solver.Kmax)

    def _amplitudes(self, model: NLWModel) -> np.ndarray:
        frequency = self.config.frequency
        if frequency.amplitudes is not None:
            amplitudes = np.asarray(frequency.amplitudes, dtype=float)
        else:
            amplitudes = amplitudes_for(frequency.omega, model.tangential, model.m)
        if amplitudes.shape != (model.d,):
            raise ConfigError(f"expected {model.d} amplitudes, got {amplitudes.size}",
                              key="frequency.amplitudes")
        return amplitudes

    def _diophantine(self) -> Optional[DiophantineParams]:
        block, solver = self.config.diophantine, self.config.solver
        if block.K == 0.0:
            return None
        return DiophantineParams(K=block.K, nu=block.nu, eta=solver.eta,
                                 max_level=solver.max_levels, cap=block.cap)

    def _rg_params(self) -> RGParams:
        solver = self.config.solver
        return RGParams(eta=solver.eta, max_levels=solver.max_levels, order=solver.order,
                        s=self.config.model.s, picard_tol=solver.picard_tol,
                        contraction_limit=solver.contraction_limit, tolerance=solver.tolerance,
                        diophantine=self._diophantine())

    def solve_torus(self, amplitudes: np.ndarray, lam: Optional[float] = None) -> SolveOutcome:
        """
        Normal form, tangential problem and RG for one amplitude vector.

        Raises:
            InadmissibleFrequencyError: omega fails a Diophantine condition
            ContractionError: The RG or the coupled iteration does not contract
        """
        model = self._model()
        normal_form = BirkhoffNormalForm(model)
        hamiltonian = ScaledHamiltonian(model, normal_form, amplitudes,
                                        self.config.frequency.lam if lam is None else lam)
        trunc = model.truncation(self.config.solver.Q)
        problem = TangentialProblem(hamiltonian, trunc, dioph=self._diophantine())
        params = self._rg_params()
        order, s = self.config.solver.order, self.config.model.s
        latest: Dict[str, RGState] = {}

        def normal_solver(y: TangentialMap) -> Tuple[FourierMap, JetFunctional]:
            w0 = build_w0(hamiltonian, y, hamiltonian.lam, order)
            state = run_rg(trunc, hamiltonian.omega, model.normal_mu, w0, params, self.should_stop)
            latest["state"] = state
            return state.z, w0

        logger.info(f"Solving: a={amplitudes.tolist()}, omega={hamiltonian.omega.tolist()}, "
                    f"lambda={hamiltonian.lam:.3e}, Q={trunc.Q}, Kmax={trunc.Kmax}")
        if self.config.solver.coupled:
            result = coupled_solve(problem, normal_solver, model.normal_mu,
                                   self.config.solver.damping, COUPLED_TOLERANCE, s)
            y, z, residual, steps = result.y, result.z, result.residual, result.steps
        else:
            y = solve_tangential(problem, FourierMap.zeros(trunc)).y
            z, w0 = normal_solver(y)
            residual = residual_fp(z, hamiltonian.omega, model.normal_mu, w0, s)
            steps = []

        state = latest.get("state")
        mu_normal = renormalised_slots(state) if state is not None else model.normal_mu
        levels = state.n if state is not None else 0
        converged = residual <= self.config.verify.residual_tol and not self.should_stop.is_set()
        solution = TorusSolution(hamiltonian.omega, hamiltonian.lam, amplitudes, y, z, mu_normal,
                                 residual, levels, converged)
        return SolveOutcome(solution, hamiltonian, state, steps)

    # Commands

    def solve(self) -> Dict[str, Any]:
        outcome = self.solve_torus(self._amplitudes(self._model()))
        solution, state = outcome.solution, outcome.state
        self._written(write_json(self.out_dir / SOLUTION_FILE, solution.to_json()))
        diagnostics = state.diagnostics if state is not None else []
        continuity = []
        if state is not None:
            # Gamma_n against its translate by omega.e_1
            unit = [1] + [0] * (solution.trunc.d - 1)
            continuity = [state.gamma_continuity(n, unit) for n in range(1, state.n + 1)]
        self._written(write_json(self.out_dir / LEVELS_FILE,
                                 {"levels": diagnostics, "gamma_continuity": continuity}))
        rows = [[d.n, d.z_norm, d.z_step, d.residual, d.identity_residual, d.commuted_residual,
                 d.gamma_norm, d.contraction, d.a_norm, d.mu_step, d.jet_tail] for d in diagnostics]
        self._written(write_csv(self.out_dir / RESIDUALS_FILE, RESIDUAL_COLUMNS, rows))

        summary: Dict[str, Any] = {"levels": solution.levels, "residual": solution.residual,
                                   "converged": solution.converged,
                                   "coupled_steps": outcome.coupled_steps}
        if state is not None and len(state.gamma_norms) >= 2:
            summary["gamma_exponent"] = fit_gamma_exponent(state.gamma_norms, state.eta)
        if not solution.converged:
            raise VerificationError([f"residual {solution.residual:.3e} above "
                                     f"{self.config.verify.residual_tol:.1e}"])
        logger.info(f"Solved in {solution.levels} levels, residual {solution.residual:.3e}")
        return summary

    def measure(self) -> Dict[str, Any]:
        block, solver = self.config.measure, self.config.solver
        dioph = self.config.diophantine
        params = DiophantineParams(K=0.0, nu=dioph.nu, eta=solver.eta, max_level=max(1, block.levels),
                                   box=block.intervals(), cap=dioph.cap)
        model = self._model()
        trunc = model.truncation(solver.Q)
        slots_by_k = {k: trunc.slots_of(k) for k in range(trunc.Kmax + 1)}
        history = static_history(model.normal_mu, slots_by_k, solver.eta, block.levels)
        rows = measure_estimate(params, history, block.samples, self.config.seed, block.K_grid)
        table = [[r.K, r.excluded_fraction, r.ci_low, r.ci_high, r.samples, r.cap_limited_count]
                 for r in rows]
        self._written(write_csv(self.out_dir / MEASURE_FILE, MEASURE_COLUMNS, table))
        slope = measure_slope(rows)
        logger.info(f"Excluded-measure slope in K: {slope}")
        return {"slope": slope, "seed": self.config.seed, "rows": len(rows)}

    def normal_form(self) -> Dict[str, Any]:
        model = self._model()
        data = BirkhoffNormalForm(model).transform()
        hypotheses = check_hypotheses(self.nlw_config, Kmax=self.config.solver.Kmax)
        self._written(write_json(self.out_dir / NORMAL_FORM_FILE,
                                 {"normal_form": data, "hypotheses": hypotheses}))
        rows = [[" ".join(str(e) for e in entry.exponent), entry.divisor, entry.bound_ratio]
                for entry in data.divisors]
        self._written(write_csv(self.out_dir / DIVISORS_FILE, ["exponent", "divisor", "bound_ratio"],
                                rows))
        return {"symplectic_defect": data.symplectic_defect,
                "nonresonant_residual": data.nonresonant_residual,
                "resonant_defect": data.resonant_defect, "min_divisor": data.min_divisor}

    def verify(self, solution_path: Optional[Path] = None) -> Dict[str, Any]:
        """
        Run every check against a stored solution and write verify.json.

        Raises:
            ConfigError: The solution artefact is missing or unreadable
            VerificationError: At least one check failed
        """
        path = Path(solution_path) if solution_path is not None else self.out_dir / SOLUTION_FILE
        if not path.is_file():
            raise ConfigError(f"solution artefact not found: {path}")
        try:
            solution = TorusSolution.from_json(read_json(path))
        except (KeyError, TypeError, ValueError) as error:
            raise ConfigError(f"unreadable solution artefact {path}: {error}") from error
        if self.record is not None:
            self.record.inputs["solution"] = file_hash(path)
            self.record.input_hash = content_hash(self.config_text, self.record.inputs["solution"])

        model = self._model()
        hamiltonian = ScaledHamiltonian(model, BirkhoffNormalForm(model), solution.amplitudes,
                                        solution.lam)
        checks: Dict[str, Dict[str, Any]] = {
            "fixed_point": self._check_fixed_point(solution, hamiltonian),
            "frequency_shift": self._check_frequency(solution, hamiltonian),
            "lindstedt": self._check_lindstedt(solution, hamiltonian),
            "pde_scaling": self._check_pde_sweep(solution),
            "tracking": self._check_tracking(solution, hamiltonian),
        }
        failures = [name for name, check in checks.items() if check["passed"] is False]
        self._written(write_json(self.out_dir / VERIFY_FILE, {"checks": checks, "failures": failures}))
        for name, check in checks.items():
            logger.info(f"Check {name}: {check['passed']}")
        if failures:
            raise VerificationError(failures)
        return {"checks": {name: check["passed"] for name, check in checks.items()}}

    # Verification checks

    def _check_fixed_point(self, solution: TorusSolution, hamiltonian: ScaledHamiltonian) -> Dict[str, Any]:
        s, tol = self.config.model.s, self.config.verify.residual_tol
        w0 = build_w0(hamiltonian, solution.tangential, solution.lam, self.config.solver.order)
        normal = residual_fp(solution.z, solution.omega, hamiltonian.model.normal_mu, w0, s)
        problem = TangentialProblem(hamiltonian, solution.trunc)
        tangential, average = problem.residual(solution.tangential, solution.z)
        return {"passed": bool(normal <= tol and tangential <= tol), "normal_residual": normal,
                "tangential_residual": tangential, "average_defect": average, "tolerance": tol}

    def _check_frequency(self, solution: TorusSolution, hamiltonian: ScaledHamiltonian) -> Dict[str, Any]:
        report = frequency_shift_check(solution, hamiltonian)
        scale = max(np.max(np.abs(report.predicted_shift)), 1e-300)
        relative = report.defect / scale
        return {"passed": bool(relative <= FREQUENCY_SHIFT_TOLERANCE), "relative_defect": relative,
                **report.model_dump()}

    def _check_lindstedt(self, solution: TorusSolution, hamiltonian: ScaledHamiltonian) -> Dict[str, Any]:
        """Compare z with the truncated series of K_0 z = lam w_hat(z) at the stored tangential part."""
        order = self.config.verify.lindstedt_order
        s, tol = self.config.model.s, self.config.verify.residual_tol
        trunc = solution.trunc
        w_hat = build_w0(hamiltonian, solution.tangential, 1.0, self.config.solver.order)
        try:
            terms = lindstedt_expand(order, w_hat, solution.omega, hamiltonian.model.normal_mu)
        except SmallDivisorError as error:
            logger.warning(f"Lindstedt series unavailable: {error}")
            return {"passed": None, "reason": str(error)}
        series = lindstedt_sum(terms, solution.lam)
        gap = flat_weighted_norm(trunc, solution.z.flat() - series, s)
        last = solution.lam ** order * flat_weighted_norm(trunc, terms[-1], s)
        bound = LINDSTEDT_TAIL_FACTOR * solution.lam * last + tol
        return {"passed": bool(gap <= bound), "gap": gap, "bound": bound, "order": order}

    def _check_pde_sweep(self, solution: TorusSolution) -> Dict[str, Any]:
        sweep = self.config.verify.sweep
        if len(sweep) < 2:
            return {"passed": None, "reason": "verify.sweep needs at least two amplitudes"}
        direction = solution.amplitudes / np.linalg.norm(solution.amplitudes)
        block = self.config.verify
        x = np.linspace(0.0, 2.0 * np.pi, block.x_points, endpoint=False)
        times = block.dt * np.arange(PDE_TIME_SAMPLES)

        def residual_at(size: float) -> float:
            outcome = self.solve_torus(size * direction)
            u = reconstruct_u(outcome.solution, outcome.hamiltonian, x, times)
            report = pde_residual(u, block.dt, self.nlw_config.m, self.nlw_config.f_coeffs)
            logger.info(f"PDE residual at |a|={size:.2e}: {report.residual:.3e}")
            return report.residual

        with ThreadPoolExecutor() as pool:
            residuals = list(pool.map(residual_at, sweep))
        slope = residual_slope(sweep, residuals)
        return {"passed": bool(slope >= PDE_SLOPE_MIN), "amplitudes": list(sweep),
                "residuals": residuals, "slope": slope, "minimum_slope": PDE_SLOPE_MIN}

    def _check_tracking(self, solution: TorusSolution, hamiltonian: ScaledHamiltonian) -> Dict[str, Any]:
        block = self.config.verify
        report = torus_deviation(solution, hamiltonian, block.T, block.integrate_dt, TRACKING_SAMPLES)
        return {"passed": None, "max_deviation": report.max_deviation,
                "energy_drift": report.energy_drift, "times": report.times,
                "deviation": report.deviation}
