"""Exception types shared across the package."""


class ConsistentIdError(Exception):
    """Base class for package-specific errors."""


class ShapeError(ConsistentIdError):
    """An array does not have the shape an operation requires."""


class DimensionError(ConsistentIdError):
    """Grid dimensions are incompatible (e.g. non-divisible downsampling)."""


class ParserFailure(ConsistentIdError):
    """A face parser returned masks of the wrong shape or non-binary values."""


class CaptionerFailure(ConsistentIdError):
    """A captioner adapter returned an incomplete description set."""


class TokenizationError(ConsistentIdError):
    """Text could not be tokenized or a region keyword was not found."""


class SequenceTooLong(ConsistentIdError):
    """A token sequence exceeds the configured maximum length."""


class ArityError(ConsistentIdError):
    """Facial-token index list does not match the number of present regions."""


class TimestepError(ConsistentIdError):
    """Timestep outside the noise schedule's valid range."""


class ConfigError(ConsistentIdError):
    """Invalid or unknown configuration values."""


class CheckpointMismatch(ConsistentIdError):
    """A checkpoint does not match the expected module or configuration."""


class DivergenceError(ConsistentIdError):
    """Training produced a non-finite loss."""


class FrozenViolation(ConsistentIdError):
    """A parameter that must stay frozen changed during training."""


class EmptyMaskError(ConsistentIdError):
    """No region mask is usable for the attention loss at any resolution."""


class NoCommonRegions(ConsistentIdError):
    """Two images share no present facial region."""


class ManifestCorrupt(ConsistentIdError):
    """A dataset manifest line failed validation."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class MissingFile(ConsistentIdError):
    """A file referenced by a dataset record does not exist."""
