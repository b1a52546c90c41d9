"""Logging configuration for the application."""
import logging
import sys
from pathlib import Path
from typing import Optional, Union

from colorlog import ColoredFormatter
from pythonjsonlogger.json import JsonFormatter

LOGGER_NAME = "condeepmod"


def setup_logger(
    name: str = LOGGER_NAME,
    level: str = "INFO",
    log_dir: Optional[Union[str, Path]] = "logs",
) -> logging.Logger:
    """Set up colored console logging and a JSON-lines log file."""

    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, level.upper()))
    logger.propagate = False

    # Remove existing handlers
    for handler in list(logger.handlers):
        handler.close()
    logger.handlers.clear()

    # Console handler with colors
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(logging.DEBUG)

    formatter = ColoredFormatter(
        "%(log_color)s%(asctime)s - %(name)s - %(levelname)s%(reset)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        log_colors={
            'DEBUG': 'cyan',
            'INFO': 'green',
            'WARNING': 'yellow',
            'ERROR': 'red',
            'CRITICAL': 'red,bg_white',
        }
    )

    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_dir is None:
        return logger

    # File handler, one JSON object per line
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)

    file_handler = logging.FileHandler(log_dir / f"{LOGGER_NAME}.log")
    file_handler.setLevel(logging.INFO)
    file_handler.setFormatter(
        JsonFormatter(
            "%(asctime)s %(name)s %(levelname)s %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )
    )
    logger.addHandler(file_handler)

    return logger


def get_logger(component: str) -> logging.Logger:
    """Child logger for one pipeline component."""
    return logging.getLogger(f"{LOGGER_NAME}.{component}")
