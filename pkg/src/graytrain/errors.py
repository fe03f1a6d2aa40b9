"""Exception taxonomy shared across the package."""


class GraytrainError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GraytrainError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(GraytrainError):
    """A documented precondition was violated by the caller."""


class FormatError(GraytrainError):
    """A binary payload (image, checkpoint) is malformed.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(GraytrainError):
    """A gradient wire message is malformed or inconsistent."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SyncTimeoutError(GraytrainError):
    """A reduction step did not receive messages from every worker."""

    def __init__(self, missing_ids):
        self.missing_ids = sorted(missing_ids)
        super().__init__(f"missing gradient messages from workers {self.missing_ids}")


class DegenerateImageError(GraytrainError):
    """Image has (near-)zero pixel variance and cannot be standardized."""


class MetadataError(GraytrainError):
    """Metadata CSV is malformed; message carries the 1-based line number."""


class VocabularyError(GraytrainError):
    """A findings entry names a class outside the label space."""


class ConfigError(GraytrainError):
    """A configuration value or file is invalid."""


class GradientOverflowError(GraytrainError):
    """A non-finite gradient reached the optimizer in full precision."""


class PersistentOverflowError(GraytrainError):
    """Dynamic loss scale underflowed; training cannot continue."""


class WorkerFailureError(GraytrainError):
    """A data-parallel worker failed; the step was rolled back."""
