# errors.py
"""Error hierarchy shared by all gradibd modules.

Every error carries a machine code (printed by the CLI as ``ERROR <code>:``) and
the process exit status it maps to: 1 for validation problems, 2 for runtime
failures.
"""
from typing import Optional


class GradIbdError(Exception):
    """Base class for all gradibd failures."""
    code = "RUNTIME"
    exit_status = 2


class ValidationError(GradIbdError, ValueError):
    """Bad input data, configuration or command line."""
    code = "VALIDATION"
    exit_status = 1


# === Codes and vocabulary ===

class EmptyCode(ValidationError):
    code = "EMPTY_CODE"


class ShortCode(ValidationError):
    code = "SHORT_CODE"


# === Cohort files and records ===

class ParseError(ValidationError):
    """Malformed line in a cohort, config or vocabulary file."""
    code = "PARSE_ERROR"

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class InvariantViolation(ValidationError):
    """A record field breaks a data-model invariant."""
    code = "INVARIANT_VIOLATION"

    def __init__(self, field: str, message: str, line_no: Optional[int] = None):
        self.field = field
        self.message = message
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{prefix}{field}: {message}")


class ConfigError(ValidationError):
    code = "CONFIG_ERROR"


class TooFewRecords(ValidationError):
    code = "TOO_FEW_RECORDS"


# === Evaluation ===

class EmptyTestSet(ValidationError):
    code = "EMPTY_TEST_SET"


class SingleClass(ValidationError):
    code = "SINGLE_CLASS"


class NoPositives(ValidationError):
    code = "NO_POSITIVES"


# === Command line and artifacts ===

class UnknownCommand(ValidationError):
    code = "UNKNOWN_COMMAND"


class MissingFlag(ValidationError):
    code = "MISSING_FLAG"


class CheckpointFormatError(ValidationError):
    code = "CHECKPOINT_FORMAT"


class OutputPathError(ValidationError):
    code = "OUTPUT_PATH"


# === Numerical core (runtime) ===

class ShapeMismatch(GradIbdError):
    code = "SHAPE_MISMATCH"


class EmptyInput(GradIbdError):
    code = "EMPTY_INPUT"


class NotScalar(GradIbdError):
    code = "NOT_SCALAR"


class EmptyIncoming(GradIbdError):
    code = "EMPTY_INCOMING"


class NonFiniteGradient(GradIbdError):
    """Adam refused a step because a gradient holds NaN or inf."""
    code = "NON_FINITE_GRADIENT"

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class NonFiniteLoss(GradIbdError):
    code = "NON_FINITE_LOSS"

    def __init__(self, batch_id: int, value: float):
        self.batch_id = batch_id
        super().__init__(f"non-finite loss {value!r} in batch {batch_id}")
