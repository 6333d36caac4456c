"""Exception types raised across the package."""


class LcnmtError(Exception):
    """Base class for package errors."""


class ShapeError(LcnmtError, ValueError):
    """Tensor dimensions do not line up."""


class NonFiniteError(LcnmtError, FloatingPointError):
    """A forward op produced NaN or Inf."""


class VerificationError(LcnmtError):
    """Gradient checking could not be carried out."""


class LengthError(LcnmtError, ValueError):
    """Sequence longer than the model's max_len."""


class ConstraintError(LcnmtError, ValueError):
    """Malformed or conflicting lexical constraints."""


class ConfigError(LcnmtError, ValueError):
    """Invalid or mismatched configuration."""


class TrainingError(LcnmtError, RuntimeError):
    """Training diverged (non-finite loss)."""


class EvaluationError(LcnmtError, ValueError):
    """Evaluation inputs are unusable."""


class FormatError(LcnmtError, ValueError):
    """File does not have the expected format."""


class CorruptionError(LcnmtError, ValueError):
    """File failed an integrity check."""
