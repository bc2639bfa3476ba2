"""
Structured errors for midway.

Domain failures raise a ``MidwayError`` subclass; ``classify_exception`` maps any
exception to a stable category for CLI messages and JSON result lines.
"""

from __future__ import annotations

import errno
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence


class MidwayError(Exception):
    """Base class for domain failures."""


class ShapeError(MidwayError, ValueError):
    """Tensor shapes do not satisfy an operation's preconditions."""


class ConfigError(MidwayError, ValueError):
    """One or more configuration problems; ``problems`` lists all of them."""

    def __init__(self, problems: Sequence[str]) -> None:
        self.problems = list(problems)
        super().__init__("; ".join(self.problems) if self.problems else "invalid config")


class StructureMismatchError(MidwayError, ValueError):
    """Student and teacher parameter collections differ."""

    def __init__(self, name: str, reason: str) -> None:
        self.name = name
        super().__init__(f"parameter {name!r}: {reason}")


class DegenerateFeatureError(MidwayError, ArithmeticError):
    """A token has zero norm and cannot be normalized."""


class NonFiniteLossError(MidwayError, ArithmeticError):
    """A loss term is NaN or infinite."""

    def __init__(self, term: str, value: float) -> None:
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss in {term}: {value}")


class DivergenceError(MidwayError, ArithmeticError):
    """Training loss exceeded the divergence threshold; a dump was written."""

    def __init__(self, step: int, value: float, dump_path: Path | None) -> None:
        self.step = step
        self.value = value
        self.dump_path = dump_path
        where = f", state dumped to {dump_path}" if dump_path else ""
        super().__init__(f"loss diverged at step {step} ({value:.4g}){where}")


class NonFiniteInputError(MidwayError, ValueError):
    """An input tensor holds NaN or infinite values."""


class DatasetError(MidwayError):
    """Dataset missing, incomplete, or lacking required ground truth."""


class CheckpointError(MidwayError):
    """Checkpoint archive missing, malformed, or incompatible."""


@dataclass(frozen=True)
class ErrorInfo:
    """Classified failure for logging and JSON output."""

    # not_found | config | shape | dataset | checkpoint | numeric | divergence | unknown
    category: str
    message: str
    detail: tuple[str, ...] = ()


def classify_exception(exc: BaseException) -> ErrorInfo:
    """Map an exception to a stable category and message."""
    if isinstance(exc, FileNotFoundError):
        return ErrorInfo("not_found", str(exc))

    if isinstance(exc, OSError) and getattr(exc, "errno", None) == errno.ENOENT:
        return ErrorInfo("not_found", str(exc))

    if isinstance(exc, ConfigError):
        return ErrorInfo("config", str(exc), tuple(exc.problems))

    if isinstance(exc, (ShapeError, StructureMismatchError)):
        return ErrorInfo("shape", str(exc))

    if isinstance(exc, DatasetError):
        return ErrorInfo("dataset", str(exc))

    if isinstance(exc, CheckpointError):
        return ErrorInfo("checkpoint", str(exc))

    if isinstance(exc, DivergenceError):
        detail = (str(exc.dump_path),) if exc.dump_path else ()
        return ErrorInfo("divergence", str(exc), detail)

    if isinstance(exc, (NonFiniteLossError, NonFiniteInputError, DegenerateFeatureError)):
        return ErrorInfo("numeric", str(exc))

    return ErrorInfo("unknown", f"{type(exc).__name__}: {exc}")


def exit_code_for(info: ErrorInfo) -> int:
    """Usage and configuration problems exit 2, everything else 1."""
    return 2 if info.category == "config" else 1


def print_classified_error(
    prefix: str,
    exc: BaseException,
    *,
    stream: Any = None,
) -> ErrorInfo:
    """Print a classified error message to *stream* (default stderr)."""
    if stream is None:
        stream = sys.stderr
    info = classify_exception(exc)
    print(f"{prefix} ERROR ({info.category}): {info.message}", file=stream)
    for line in info.detail:
        print(f"{prefix}   - {line}", file=stream)
    return info


def error_record(
    source: str,
    info: ErrorInfo,
    *,
    elapsed_ms: int,
    exc: BaseException | None = None,
) -> dict[str, Any]:
    """Build a JSON failure record for one item or command."""
    if exc is not None:
        error_text = f"{type(exc).__name__}: {exc}"
    else:
        error_text = info.message

    record: dict[str, Any] = {
        "source": source,
        "elapsed_ms": elapsed_ms,
        "error": error_text,
        "error_category": info.category,
    }
    if info.detail:
        record["error_detail"] = list(info.detail)
    return record
