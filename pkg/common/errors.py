"""
Exception hierarchy for the low-rank compression toolkit.

Every module raises one of these so the CLI can map failures onto
distinct exit codes.
"""


class CompressorError(Exception):
    """Base class for all toolkit errors."""
    pass


class InvalidArgumentError(CompressorError, ValueError):
    """Raised when an operation's precondition is violated."""
    pass


class DegenerateInputError(CompressorError, ValueError):
    """Raised when an input carries no signal to analyse (e.g. an all-zero matrix)."""
    pass


class UndefinedRatioError(CompressorError, ValueError):
    """Raised when a relative measure would divide by a zero norm."""
    pass


class UnsupportedTopologyError(CompressorError):
    """Raised when a model's layer arrangement cannot be processed."""
    pass


class ModelIOError(CompressorError):
    """Raised when a model or dataset file cannot be read or written."""
    pass


class MalformedManifestError(CompressorError):
    """Raised when a manifest is unparsable or describes an unknown layer."""
    pass


class UnsupportedVersionError(MalformedManifestError):
    """Raised when a manifest declares a format version this build cannot read."""
    pass


class ChecksumMismatchError(CompressorError):
    """Raised when a weight blob does not match the checksums in its manifest."""
    pass


class NothingToDoError(CompressorError):
    """Raised when a model has no layer that low-rank approximation applies to."""
    pass


class TrainingDivergedError(CompressorError):
    """
    Raised when fine-tuning produces a non-finite loss.

    Attributes:
        model: Last model state whose loss was finite (may be None)
        records: Iteration records completed before the failure (set by the pipeline)
    """

    def __init__(self, message: str, model=None, records=None):
        super().__init__(message)
        self.model = model
        self.records = list(records) if records else []
