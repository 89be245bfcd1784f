"""
Run records and artefact writers.

Every command leaves a run_record.json next to its artefacts: the resolved configuration,
a content hash of the inputs and the versions of the numerical stack, so a run can be
repeated from the record alone.
"""

import csv
import hashlib
import json
import math
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import scipy
from pydantic import BaseModel, Field

from utils.config import RECORD_FILE
from utils.number_format import format_row
from .logger import Logger

logger = Logger().get_logger()

PathLike = Union[str, Path]


def make_json_safe(obj: Any) -> Any:
    """Recursively turn models, numpy values and complex numbers into plain JSON types."""
    if isinstance(obj, BaseModel):
        obj = obj.model_dump(by_alias=True)
    if isinstance(obj, dict):
        return {str(k): make_json_safe(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return make_json_safe(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return [make_json_safe(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, (np.complexfloating, complex)):
        return {"re": make_json_safe(obj.real), "im": make_json_safe(obj.imag)}
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(value: Any) -> str:
    return json.dumps(make_json_safe(value), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(*parts: Any) -> str:
    """sha256 over the canonical JSON of each part, NUL separated."""
    digest = hashlib.sha256()
    for part in parts:
        text = part if isinstance(part, str) else canonical_json(part)
        digest.update(text.encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()


def file_hash(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stack_versions() -> Dict[str, str]:
    import pydantic
    return {"python": sys.version.split()[0], "platform": platform.platform(),
            "numpy": np.__version__, "scipy": scipy.__version__, "pydantic": pydantic.VERSION}


def write_json(path: PathLike, payload: Any) -> Path:
    """Write ``payload`` as indented JSON; floats keep their shortest round-trip text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        json.dump(make_json_safe(payload), f, indent=2, allow_nan=False)
        f.write("\n")
    logger.info(f"Wrote {path}")
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    with Path(path).open("r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"json root must be an object: {path}")
    return data


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    """Comma-separated, header row, LF line endings, floats with 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(format_row(row))
            count += 1
    logger.info(f"Wrote {path} ({count} rows)")
    return path


class RunRecord(BaseModel):
    """Self-describing record of one command invocation."""

    command: str
    started: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: Optional[str] = None
    elapsed_seconds: Optional[float] = None
    exit_code: Optional[int] = None
    status: str = "running"
    config: Dict[str, Any] = Field(default_factory=dict)
    input_hash: str = ""
    inputs: Dict[str, str] = Field(default_factory=dict)
    versions: Dict[str, str] = Field(default_factory=stack_versions)
    artefacts: List[str] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)
    error: Optional[Dict[str, Any]] = None

    def add_artefact(self, path: PathLike) -> None:
        self.artefacts.append(Path(path).name)

    def finish(self, exit_code: int, elapsed: float, error: Optional[BaseException] = None) -> None:
        self.finished = datetime.now(timezone.utc).isoformat()
        self.elapsed_seconds = elapsed
        self.exit_code = exit_code
        self.status = "ok" if exit_code == 0 else ("partial" if self.artefacts else "failed")
        if error is not None:
            self.error = {"type": type(error).__name__, "message": str(error),
                          "witness": make_json_safe(getattr(error, "witness", {}))}

    def write(self, directory: PathLike) -> Path:
        return write_json(Path(directory) / RECORD_FILE, self)
