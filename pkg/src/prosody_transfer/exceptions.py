"""Exception hierarchy shared across the package."""


class ProsodyTransferError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(ProsodyTransferError, ValueError):
    """Input data violates a precondition (non-finite values, bad ids, too short)."""


class InvalidConfigError(ProsodyTransferError, ValueError):
    """A configuration value or layer geometry is not usable."""


class AlignmentError(ProsodyTransferError, ValueError):
    """Sequence lengths that must agree do not (durations vs frames, x vs y)."""


class FormatError(ProsodyTransferError):
    """A binary or text file does not match its declared format."""


class NameMismatchError(FormatError):
    """Checkpoint entries do not match the parameters of the target model."""


class ChecksumError(FormatError):
    """Payload CRC does not match the stored trailer."""


class CorpusError(ProsodyTransferError):
    """A corpus directory is missing files or is internally inconsistent."""


class TrainingError(ProsodyTransferError):
    """Optimization diverged; carries the offending step."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
