"""Exception hierarchy shared across the engine.

Every error carries enough context to be actionable from a log line. The CLI
maps these onto exit codes: usage errors exit 1, input/schema errors exit 2,
internal invariant violations exit 3.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class InputError(EngineError):
    """Bad input data or schema (exit code 2)."""

    exit_code = 2


class InternalError(EngineError):
    """An internal invariant was violated (exit code 3)."""

    exit_code = 3


# --- corpus ingestion ---

class MissingColumn(InputError):
    def __init__(self, column: str, path: str = ""):
        super().__init__(f"required column {column!r} not found" + (f" in {path}" if path else ""))
        self.column = column


class MalformedRow(InputError):
    def __init__(self, line_number: int, reason: str):
        super().__init__(f"malformed row at line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


class DuplicateRecordId(InputError):
    def __init__(self, record_id: str):
        super().__init__(f"duplicate record_id {record_id!r}")
        self.record_id = record_id


class SchemaMismatch(InputError):
    def __init__(self, reason: str):
        super().__init__(f"structured annotation file does not match schema: {reason}")
        self.reason = reason


class BoxOutOfBounds(InputError):
    def __init__(self, record_id: str, box, frame_width, frame_height):
        super().__init__(
            f"box {box} of record {record_id!r} exceeds frame {frame_width}x{frame_height}"
        )
        self.record_id = record_id
        self.box = box


class VersionMismatch(InputError):
    def __init__(self, found, expected):
        super().__init__(f"incompatible store header: found {found!r}, expected {expected!r}")
        self.found = found
        self.expected = expected


# --- role parsing ---

class SpanOutOfRange(InputError):
    def __init__(self, span, n_tokens: int, description: str):
        super().__init__(f"token span {span} out of range for {n_tokens} tokens in {description!r}")
        self.span = span


class UnknownRoleLabel(InputError):
    def __init__(self, label: str, known):
        super().__init__(f"unknown role label {label!r}; configured roles: {sorted(known)}")
        self.label = label


# --- matching ---

class MissingTaxonomy(InputError):
    def __init__(self, group_id: str, role: str):
        super().__init__(f"group {group_id!r} has no taxonomy class for role {role!r}")
        self.group_id = group_id
        self.role = role


# --- generation ---

class InsufficientCandidates(InternalError):
    """Raised only when sampling is attempted on an instruction that never
    passed the eligibility filter."""

    def __init__(self, group_id: str, category, needed: int, available: int):
        super().__init__(
            f"instruction {group_id!r}, category {sorted(category)}: "
            f"needs {needed} candidates, found {available} (eligibility bypassed?)"
        )


class EmptyInput(InputError):
    def __init__(self, what: str):
        super().__init__(f"{what} must be non-empty")


# --- splitting ---

class RatioInfeasible(InputError):
    def __init__(self, units: int, parts: int):
        super().__init__(f"cannot split {units} units across {parts} non-zero ratio parts")


# --- evaluation ---

class UnknownSampleId(InputError):
    def __init__(self, sample_id: str):
        super().__init__(f"prediction references unknown sample_id {sample_id!r}")
        self.sample_id = sample_id


class MissingPrediction(InputError):
    def __init__(self, sample_id: str, task: str = ""):
        super().__init__(
            f"no {task + ' ' if task else ''}prediction for in-scope sample {sample_id!r}"
        )
        self.sample_id = sample_id


class MalformedPrediction(InputError):
    def __init__(self, line_number: int, reason: str):
        super().__init__(f"malformed prediction at line {line_number}: {reason}")
        self.line_number = line_number
