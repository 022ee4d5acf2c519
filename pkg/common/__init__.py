"""
Common utilities shared by the compression modules, the CLI and the tests.
"""

from .hash_utils import compute_hash, verify_hash
from .file_utils import safe_write_file
from .errors import (
    CompressorError,
    InvalidArgumentError,
    DegenerateInputError,
    UndefinedRatioError,
    UnsupportedTopologyError,
    ModelIOError,
    MalformedManifestError,
    UnsupportedVersionError,
    ChecksumMismatchError,
    NothingToDoError,
    TrainingDivergedError,
)

__all__ = [
    'compute_hash',
    'verify_hash',
    'safe_write_file',
    'CompressorError',
    'InvalidArgumentError',
    'DegenerateInputError',
    'UndefinedRatioError',
    'UnsupportedTopologyError',
    'ModelIOError',
    'MalformedManifestError',
    'UnsupportedVersionError',
    'ChecksumMismatchError',
    'NothingToDoError',
    'TrainingDivergedError',
]
