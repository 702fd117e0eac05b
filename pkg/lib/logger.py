"""
Logging setup for botgraph using loguru.

This module provides the single logging configuration shared by the library
and the command-line interface:
- Console output on stderr (stdout stays free for TSV/JSON results)
- Optional file output with rotation and retention
- Structured context through logger.bind()
- A stage timer that logs start, finish and duration of pipeline steps
"""

import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

from loguru import logger

from lib.utils import human_readable_duration

VALID_LEVELS = ["TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL"]

_CONSOLE_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> | "
    "<level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> | "
    "<level>{message}</level>"
)

_FILE_FORMAT = (
    "{time:YYYY-MM-DD HH:mm:ss.SSS} | "
    "{level: <8} | "
    "{name}:{function}:{line} | "
    "{message} | {extra}"
)


def _normalize_level(level: str) -> str:
    level = level.upper()
    if level not in VALID_LEVELS:
        raise ValueError(f"Invalid log level: {level}. Must be one of {VALID_LEVELS}")
    return level


def setup_logger(
    log_level: str = "INFO",
    log_file: Optional[Path] = None,
    console: bool = True,
    rotation: str = "10 MB",
    retention: str = "1 week",
    compression: Optional[str] = "zip",
    format_string: Optional[str] = None,
    enqueue: bool = False,
) -> None:
    """
    Configure loguru logger for the application.

    Console logs go to stderr so that commands printing results (for example
    `botgraph ppr`) can be piped. File logs carry the bound structured context
    in every line.

    Args:
        log_level: Minimum log level. Options: TRACE, DEBUG, INFO, SUCCESS,
            WARNING, ERROR, CRITICAL
        log_file: Path to log file. If None, file logging is disabled
        console: Enable console logging on stderr
        rotation: When to rotate log files. Examples: "10 MB", "1 day"
        retention: How long to keep old log files. Examples: "1 week"
        compression: Compression format for rotated logs ("zip", "gz", None)
        format_string: Custom console format string. If None, uses default
        enqueue: Enable queued (multiprocess-safe) logging. False writes
            synchronously, which keeps test output deterministic

    Raises:
        ValueError: If log_level is invalid

    Example:
        >>> setup_logger(log_level="DEBUG", log_file=Path("runs/train.log"))
        >>> logger.bind(**log_context(stage="sample", k=32)).info("Sampling")
    """
    log_level = _normalize_level(log_level)
    logger.remove()

    if console:
        logger.add(
            sys.stderr,
            format=format_string or _CONSOLE_FORMAT,
            level=log_level,
            colorize=True,
            backtrace=True,
            diagnose=False,
        )

    if log_file:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        logger.add(
            str(log_file),
            format=_FILE_FORMAT,
            level=log_level,
            rotation=rotation,
            retention=retention,
            compression=compression,
            backtrace=True,
            diagnose=False,
            enqueue=enqueue,
        )


def get_logger():
    """Shared loguru logger; handlers are installed only by setup_logger()."""
    return logger


def log_context(**kwargs: Any) -> Dict[str, Any]:
    """
    Structured fields for logger.bind(), dropping None values.

    Example:
        >>> logger.bind(**log_context(relation="follow", start=17)).debug("PPR done")
    """
    return {key: value for key, value in kwargs.items() if value is not None}


@contextmanager
def stage_timer(stage: str, **context: Any) -> Iterator[Dict[str, Any]]:
    """
    Log the start and completion of a named stage with its duration.

    The yielded dictionary can be filled by the caller with result details,
    which are logged on completion.

    Args:
        stage: Stage name (e.g. "pretrain")
        **context: Extra structured context bound to both log lines

    Yields:
        Mutable dictionary of result details

    Example:
        >>> with stage_timer("sample", k=32) as info:
        ...     info["subgraphs"] = 1200
    """
    bound = logger.bind(stage=stage, **context)
    bound.info(f"Stage '{stage}' started")
    details: Dict[str, Any] = {}
    start = time.perf_counter()
    try:
        yield details
    except Exception:
        elapsed = time.perf_counter() - start
        bound.error(f"Stage '{stage}' failed after {human_readable_duration(elapsed)}")
        raise
    elapsed = time.perf_counter() - start
    suffix = f" ({details})" if details else ""
    bound.info(
        f"Stage '{stage}' finished in {human_readable_duration(elapsed)}{suffix}"
    )


__all__ = [
    "setup_logger",
    "get_logger",
    "log_context",
    "stage_timer",
    "logger",
]
