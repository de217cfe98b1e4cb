"""Exception hierarchy. Every error carries a short machine-readable ``kind``."""


class CRLError(Exception):
    kind = "error"


class ConfigError(CRLError, ValueError):
    kind = "config"


class ContractError(CRLError, ValueError):
    """Caller passed arrays/objects that violate an operation's preconditions."""
    kind = "contract"


class NumericInputError(CRLError, ValueError):
    kind = "numeric-input"


class DatasetFormatError(CRLError, OSError):
    """Malformed or truncated dataset/checkpoint file; ``offset`` is the byte position."""
    kind = "io"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SchemaViolationError(DatasetFormatError):
    kind = "schema"


class EvaluationError(CRLError, ValueError):
    kind = "evaluation"


class TrainingDiverged(CRLError, RuntimeError):
    kind = "diverged"
