"""
Run configuration: flat ``section.key = value`` files parsed into validated blocks.
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import (BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator,
                      model_validator)
from typing_extensions import Annotated

from core.errors import ConfigError
from utils.config import (COUPLED_DAMPING, DEFAULT_DIOPH_CAP, DEFAULT_ETA, DEFAULT_FOURIER_CUTOFF,
                          DEFAULT_JET_ORDER, DEFAULT_K_GRID, DEFAULT_MASS, DEFAULT_MAX_LEVELS,
                          DEFAULT_MEASURE_SAMPLES, DEFAULT_MODE_CUTOFF, DEFAULT_SOBOLEV_WEIGHT,
                          DEFAULT_SPACE_CUTOFF, CONTRACTION_LIMIT, LINDSTEDT_MAX_ORDER,
                          PICARD_TOLERANCE, RESIDUAL_TOLERANCE)

Scalar = Union[bool, int, float, str]
Value = Union[Scalar, List[Scalar]]


def _as_list(value: Any) -> Any:
    return value if isinstance(value, (list, tuple)) or value is None else [value]


# A single value given for a list setting is a one-element list
FloatList = Annotated[List[float], BeforeValidator(_as_list)]
IntList = Annotated[List[int], BeforeValidator(_as_list)]


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ModelBlock(_Block):
    m: float = Field(default=DEFAULT_MASS, gt=0.0)
    f: FloatList = Field(default_factory=lambda: [1.0])
    tangential: IntList = Field(default_factory=lambda: [1])
    space_cutoff: int = Field(default=DEFAULT_SPACE_CUTOFF, ge=1)
    s: float = DEFAULT_SOBOLEV_WEIGHT


class SolverBlock(_Block):
    Q: int = Field(default=DEFAULT_FOURIER_CUTOFF, ge=1)
    Kmax: int = Field(default=DEFAULT_MODE_CUTOFF, ge=0)
    order: int = Field(default=DEFAULT_JET_ORDER, ge=1, le=3)
    eta: float = Field(default=DEFAULT_ETA, gt=0.0, lt=1.0)
    max_levels: int = Field(default=DEFAULT_MAX_LEVELS, ge=1)
    tolerance: float = Field(default=0.0, ge=0.0)
    picard_tol: float = Field(default=PICARD_TOLERANCE, gt=0.0)
    contraction_limit: float = Field(default=CONTRACTION_LIMIT, gt=0.0, le=1.0)
    damping: float = Field(default=COUPLED_DAMPING, gt=0.0, le=1.0)
    coupled: bool = True


class FrequencyBlock(_Block):
    """Either amplitudes ``a`` or an explicit ``omega``; ``lambda`` defaults to |a|."""

    amplitudes: Optional[FloatList] = None
    omega: Optional[FloatList] = None
    lam: Optional[float] = Field(default=None, alias="lambda", ge=0.0)

    @model_validator(mode="after")
    def _one_source(self) -> "FrequencyBlock":
        if self.amplitudes is None and self.omega is None:
            raise ValueError("frequency block needs amplitudes or omega")
        if self.amplitudes is not None and self.omega is not None:
            raise ValueError("give amplitudes or omega, not both")
        return self


class DiophantineBlock(_Block):
    K: float = Field(default=0.0, ge=0.0)
    nu: Optional[float] = None
    cap: int = Field(default=DEFAULT_DIOPH_CAP, ge=1)


class MeasureBlock(_Block):
    samples: int = Field(default=DEFAULT_MEASURE_SAMPLES, ge=1)
    box: FloatList = Field(default_factory=list)
    K_grid: FloatList = Field(default_factory=lambda: list(DEFAULT_K_GRID))
    levels: int = Field(default=4, ge=0)

    @field_validator("box")
    @classmethod
    def _pairs(cls, value: List[float]) -> List[float]:
        if len(value) % 2:
            raise ValueError("box lists lo, hi pairs; odd number of entries")
        return value

    def intervals(self) -> List[Tuple[float, float]]:
        return [(self.box[i], self.box[i + 1]) for i in range(0, len(self.box), 2)]


class VerifyBlock(_Block):
    x_points: int = Field(default=64, ge=8)
    dt: float = Field(default=1.0e-2, gt=0.0)
    T: float = Field(default=50.0, gt=0.0)
    integrate_dt: float = Field(default=1.0e-2, gt=0.0)
    sweep: FloatList = Field(default_factory=list)
    lindstedt_order: int = Field(default=3, ge=1, le=LINDSTEDT_MAX_ORDER)
    residual_tol: float = Field(default=RESIDUAL_TOLERANCE, gt=0.0)


class OutputBlock(_Block):
    dir: str = "runs/latest"


class RunConfig(_Block):
    model: ModelBlock = Field(default_factory=ModelBlock)
    solver: SolverBlock = Field(default_factory=SolverBlock)
    frequency: FrequencyBlock
    diophantine: DiophantineBlock = Field(default_factory=DiophantineBlock)
    measure: MeasureBlock = Field(default_factory=MeasureBlock)
    verify: VerifyBlock = Field(default_factory=VerifyBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)
    seed: int = Field(default=0, ge=0)

    def echo(self) -> Dict[str, Any]:
        """Dotted-key view of every setting, defaults included."""
        flat: Dict[str, Any] = {}
        for section, block in self.model_dump(by_alias=True).items():
            if isinstance(block, dict):
                for key, value in block.items():
                    flat[f"{section}.{key}"] = value
            else:
                flat[section] = block
        return flat


SECTIONS = ("model", "solver", "frequency", "diophantine", "measure", "verify", "output")


def _scalar(text: str) -> Scalar:
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_value(text: str) -> Value:
    """
    Parse a right-hand side.

    Examples:
        >>> parse_value("1e-3")
        0.001
        >>> parse_value("[1, 2]")
        [1, 2]
        >>> parse_value("0.5, 1.5")
        [0.5, 1.5]
    """
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        return [_scalar(part.strip()) for part in inner.split(",")] if inner else []
    if "," in text and text[0] not in "\"'":
        return [_scalar(part.strip()) for part in text.split(",")]
    return _scalar(text)


def _strip_comment(line: str) -> str:
    quote = None
    for i, char in enumerate(line):
        if char in "\"'":
            quote = None if quote == char else (quote or char)
        elif char == "#" and quote is None:
            return line[:i]
    return line


def parse_lines(text: str) -> Tuple[Dict[str, Dict[str, Value]], Dict[str, int]]:
    """
    Split a config text into {section: {key: value}} plus the line number of every dotted key.

    Raises:
        ConfigError: Missing '=', empty key, unknown section, nesting or duplicate keys
    """
    tree: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError("empty key or value", line=number, key=key or None)
        if key in lines:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", line=number, key=key)
        parts = key.split(".")
        if len(parts) > 2:
            raise ConfigError("keys nest at most one level", line=number, key=key)
        if len(parts) == 2:
            section, name = parts
            if section not in SECTIONS:
                raise ConfigError(f"unknown section '{section}'", line=number, key=key)
            tree.setdefault(section, {})[name] = parse_value(value)
        else:
            if key in SECTIONS:
                raise ConfigError("section name used as a key", line=number, key=key)
            tree[key] = parse_value(value)
        lines[key] = number
    return tree, lines


def parse_config(text: str) -> RunConfig:
    """
    Parse and validate a configuration text.

    Raises:
        ConfigError: Syntax problems or invalid values, with the offending line and key
    """
    tree, lines = parse_lines(text)
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        error = exc.errors()[0]
        loc = [str(part) for part in error["loc"]]
        key = ".".join(loc[:2]) if loc else None
        line = lines.get(key) if key else None
        if line is None and loc:
            line = next((n for k, n in lines.items() if k.startswith(loc[0])), None)
        raise ConfigError(error["msg"], line=line, key=key) from exc


def load_config(path: Union[str, Path]) -> Tuple[RunConfig, str]:
    """
    Read and parse a config file.

    Returns:
        Tuple[RunConfig, str]: The config and the raw text, kept for hashing

    Raises:
        ConfigError: Unreadable file or invalid content
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text), text
