import hashlib

from .errors import ChecksumMismatchError


def compute_hash(data: bytes | str) -> str:
    """Compute SHA-256 hash of a weight blob or manifest text.

    Args:
        data: Raw bytes, or text encoded as UTF-8

    Returns:
        SHA-256 hash as hexadecimal string
    """
    if isinstance(data, str):
        data = data.encode('utf-8')
    return hashlib.sha256(data).hexdigest()


def verify_hash(data: bytes, expected_size: int, expected_hash: str, label: str) -> None:
    """Check the length and SHA-256 hash of a stored byte range.

    Args:
        data: Bytes read back from storage
        expected_size: Byte count recorded when the data was written
        expected_hash: Hash recorded when the data was written
        label: What the bytes are, for the error message

    Raises:
        ChecksumMismatchError: If the data is truncated or altered
    """
    if len(data) != expected_size:
        raise ChecksumMismatchError(f"{label}: expected {expected_size} bytes, found {len(data)}")
    if compute_hash(data) != expected_hash:
        raise ChecksumMismatchError(f"{label}: checksum mismatch")
