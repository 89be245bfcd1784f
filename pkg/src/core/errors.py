"""
Domain exceptions for the torus solver.
Each class carries the CLI exit code it maps to.
"""

from typing import Any, Dict, List, Optional

from utils.config import EXIT_CONFIG, EXIT_CONTRACTION, EXIT_INADMISSIBLE, EXIT_VERIFY_FAILED


class TorusError(Exception):
    """Base class; ``witness`` holds structured context for run records."""

    exit_code: int = EXIT_VERIFY_FAILED

    def __init__(self, message: str, witness: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.witness = witness or {}


class ConfigError(TorusError):
    """Malformed configuration file or invalid values."""

    exit_code = EXIT_CONFIG

    def __init__(self, message: str, line: Optional[int] = None,
                 key: Optional[str] = None) -> None:
        location = []
        if line is not None:
            location.append(f"line {line}")
        if key is not None:
            location.append(f"key '{key}'")
        prefix = f"[{', '.join(location)}] " if location else ""
        super().__init__(f"{prefix}{message}", {"line": line, "key": key})
        self.line = line
        self.key = key


class ParameterError(TorusError):
    """A model parameter outside its domain (m <= 0, delta <= 0, ...)."""

    exit_code = EXIT_CONFIG


class InadmissibleFrequencyError(TorusError):
    """A Diophantine condition fails; witness holds q, clusters, distance and threshold."""

    exit_code = EXIT_INADMISSIBLE


class SmallDivisorError(TorusError):
    """Near-singular K_n block or vanishing expansion denominator."""

    exit_code = EXIT_INADMISSIBLE


class ContractionError(TorusError):
    """Fixed-point map fails to contract or an iteration stagnates."""

    exit_code = EXIT_CONTRACTION


class TruncationError(TorusError):
    """Truncation mismatch, dense-kernel cap exceeded or analyticity ball overflow."""


class ExcludedPatternError(TorusError):
    """Divisor requested for a resonant {n, n, n', n'} combination."""


class StepSizeError(TorusError):
    """Integrator step above the stability threshold."""


class VerificationError(TorusError):
    """One or more verification checks failed."""

    def __init__(self, failures: List[str]) -> None:
        super().__init__(f"{len(failures)} check(s) failed: {', '.join(failures)}",
                         {"failures": failures})
        self.failures = failures
