"""
Utility functions for botgraph.

This module provides common helpers used throughout the project for path
operations, reproducibility, content hashing, formatting and JSON output.
"""

import hashlib
import json
import os
import random
import tempfile
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np
import torch

# Path Operations


def ensure_directory(path: Union[str, Path]) -> Path:
    """
    Create a directory and its parents if missing.

    Raises:
        ValueError: If path is empty
        NotADirectoryError: If path exists as a file
    """
    if not str(path):
        raise ValueError("Directory path cannot be empty")
    directory = Path(path)
    if directory.exists() and not directory.is_dir():
        raise NotADirectoryError(f"Not a directory: {directory}")
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def atomic_write_bytes(path: Union[str, Path], payload: bytes) -> Path:
    """
    Write bytes to a file through a temporary sibling and an atomic rename.

    Readers see either the old file or the complete new one.

    Args:
        path: Destination file
        payload: Bytes to write

    Returns:
        Destination path
    """
    path_obj = Path(path)
    ensure_directory(path_obj.parent)
    fd, tmp_name = tempfile.mkstemp(dir=path_obj.parent, prefix=f".{path_obj.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path_obj)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path_obj


def write_json(path: Union[str, Path], data: Any) -> Path:
    """
    Write a JSON report with sorted keys and a trailing newline.

    Args:
        path: Destination file
        data: JSON-serializable value

    Returns:
        Destination path
    """
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    return atomic_write_bytes(path, text.encode("utf-8"))


# Reproducibility


def seed_everything(seed: int) -> None:
    """
    Seed the Python, NumPy and torch global generators.

    Library code passes explicit numpy Generators around; the global seeds
    cover torch parameter initialization and dropout masks.

    Args:
        seed: Non-negative integer seed
    """
    if seed < 0:
        raise ValueError(f"Seed must be non-negative, got {seed}")
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def configure_threads(workers: int) -> None:
    """
    Limit torch intra-op threads.

    workers=1 gives bit-identical reruns.

    Args:
        workers: Number of threads (>= 1)
    """
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    torch.set_num_threads(workers)


def config_digest(data: Mapping[str, Any], length: int = 16) -> str:
    """
    Content hash of a configuration mapping.

    Keys are sorted and paths are stringified, so equal resolved
    configurations always produce equal digests.

    Args:
        data: Configuration mapping (JSON-compatible after str() of unknowns)
        length: Number of hex characters to keep

    Returns:
        Hex digest prefix

    Example:
        >>> config_digest({"k": 32}) == config_digest({"k": 32})
        True
    """
    canonical = json.dumps(data, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:length]


# Format Helpers

_DURATION_UNITS = (("d", 86400), ("h", 3600), ("m", 60), ("s", 1))
_BYTE_UNITS = ("B", "KB", "MB", "GB", "TB")


def human_readable_duration(seconds: Union[int, float]) -> str:
    """
    Short duration string for stage logs.

    Example:
        >>> human_readable_duration(1.5)
        '1.50s'
        >>> human_readable_duration(3665)
        '1h 1m 5s'
    """
    if seconds < 0:
        raise ValueError(f"Duration cannot be negative, got {seconds}")
    if seconds < 60:
        return f"{seconds:.2f}s"

    remaining = int(seconds)
    parts = []
    for suffix, size in _DURATION_UNITS:
        count, remaining = divmod(remaining, size)
        if count:
            parts.append(f"{count}{suffix}")
    return " ".join(parts)


def format_bytes(size: Union[int, float], precision: int = 2) -> str:
    """Binary-prefixed file size, e.g. ``format_bytes(1536) == "1.50 KB"``."""
    if size < 0:
        raise ValueError(f"Size cannot be negative, got {size}")
    value = float(size)
    for unit in _BYTE_UNITS[:-1]:
        if value < 1024.0:
            return f"{value:.{precision}f} {unit}"
        value /= 1024.0
    return f"{value:.{precision}f} {_BYTE_UNITS[-1]}"
