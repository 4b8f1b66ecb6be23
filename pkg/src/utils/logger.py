# File: src/utils/logger.py

"""Logging configuration for the command-line tools."""

import logging
import os
import sys
from pathlib import Path
from typing import Optional

DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _has_handler(logger: logging.Logger, handler_type: type, target: Optional[str] = None) -> bool:
    for handler in logger.handlers:
        if type(handler) is not handler_type:
            continue
        if target is None or getattr(handler, "baseFilename", None) == target:
            return True
    return False


def setup_logger(
    name: str = "",
    level: int = logging.INFO,
    log_file: Optional[Path] = None,
    format: str = DEFAULT_FORMAT,
) -> logging.Logger:
    """
    Configure logging with console and optional file output.

    Calling it again for the same logger updates the level and adds only the
    handlers it does not already have.

    Args:
        name: Logger name; the empty string configures the root logger
        level: Logging level
        log_file: Optional path for a log file, parent directories created
        format: Log message format

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)

    formatter = logging.Formatter(format)

    # Console handler, re-pointed at the current stderr when it already exists
    for handler in logger.handlers:
        if type(handler) is logging.StreamHandler:
            handler.stream = sys.stderr
    if not _has_handler(logger, logging.StreamHandler):
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    # File handler if specified
    if log_file:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        if not _has_handler(logger, logging.FileHandler, os.path.abspath(log_file)):
            file_handler = logging.FileHandler(log_file, mode="w")
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)

    return logger


def remove_file_handlers(logger: logging.Logger):
    """Close and detach every file handler, e.g. at the end of a run."""
    for handler in list(logger.handlers):
        if isinstance(handler, logging.FileHandler):
            handler.close()
            logger.removeHandler(handler)
