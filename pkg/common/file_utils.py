"""
File utility functions for model, dataset and report output.
"""
import os


def safe_write_file(file_path: str, content: str | bytes) -> None:
    """
    Write content to a file safely.

    The parent directory is created if needed and the data is written to a
    sibling temporary file first, then moved into place, so a crash never
    leaves a half-written model behind.

    Args:
        file_path: Path of the file to write
        content: Text (written as UTF-8) or raw bytes
    """
    directory = os.path.dirname(os.path.abspath(file_path))
    os.makedirs(directory, exist_ok=True)

    tmp_path = f"{file_path}.tmp"
    if isinstance(content, bytes):
        with open(tmp_path, 'wb') as f:
            f.write(content)
    else:
        with open(tmp_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(content)
    os.replace(tmp_path, file_path)
