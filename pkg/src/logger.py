#!/usr/bin/env python3
"""
Logging Configuration Module
=============================
Colored console logging for training runs, plus a plain per-run log file.

Key Features:
- Color-coded log levels (Green=INFO, Yellow=WARNING, Red=ERROR, etc.)
- Console output, an optional log file, and a per-run train.log
- Section banners for the phases of a run
"""

import logging
import sys
from contextlib import contextmanager
from pathlib import Path

LOG_FORMAT = '[%(asctime)s] %(levelname)-8s %(name)s: %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
BANNER_WIDTH = 70


class ColoredFormatter(logging.Formatter):
    """
    Log formatter that adds ANSI colors to the level name

    - Cyan (36): DEBUG
    - Green (32): INFO
    - Yellow (33): WARNING
    - Red (31): ERROR
    - Magenta (35): CRITICAL
    """

    COLORS = {
        'DEBUG': '\033[36m',
        'INFO': '\033[32m',
        'WARNING': '\033[33m',
        'ERROR': '\033[31m',
        'CRITICAL': '\033[35m',
    }
    RESET = '\033[0m'

    def format(self, record):
        # Color a copy so file handlers sharing the record stay plain
        colored = logging.makeLogRecord(record.__dict__)
        if colored.levelname in self.COLORS:
            colored.levelname = f"{self.COLORS[colored.levelname]}{colored.levelname}{self.RESET}"
        return super().format(colored)


def parse_level(level) -> int:
    """
    Accept a level name ('INFO') or number

    Raises:
        ValueError: If the name is not a logging level
    """
    if isinstance(level, int):
        return level
    value = logging.getLevelName(str(level).upper())
    if not isinstance(value, int):
        raise ValueError(f"unknown log level: {level}")
    return value


def setup_logger(log_level=logging.INFO, log_file=None, color=True):
    """
    Configure the root logger

    Args:
        log_level: level name or number for the console
        log_file: optional path; the file always receives DEBUG and above
        color (bool): color the console level names

    Returns:
        Configured root logger
    """
    level = parse_level(log_level)
    root_logger = logging.getLogger()
    root_logger.setLevel(min(level, logging.DEBUG) if log_file else level)

    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
        handler.close()

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level)
    formatter_class = ColoredFormatter if color else logging.Formatter
    console_handler.setFormatter(formatter_class(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
    root_logger.addHandler(console_handler)

    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_path, mode='a')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
        root_logger.addHandler(file_handler)

    return root_logger


def get_logger(name):
    """
    Get a logger for a specific module

    Usage:
        log = get_logger(__name__)
        log.info("Hello world")
    """
    return logging.getLogger(name)


def log_section(log, title: str):
    """Write a banner marking the start of a run phase"""
    log.info("=" * BANNER_WIDTH)
    log.info(title)
    log.info("=" * BANNER_WIDTH)


@contextmanager
def run_log_file(log_file):
    """
    Copy every record to ``log_file`` while the block runs

    Usage:
        with run_log_file(run_dir / 'train.log'):
            trainer.train()
    """
    log_path = Path(log_file)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(log_path, mode='a')
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
    root_logger = logging.getLogger()
    root_logger.addHandler(handler)
    try:
        yield log_path
    finally:
        root_logger.removeHandler(handler)
        handler.close()
