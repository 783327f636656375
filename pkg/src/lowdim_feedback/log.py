"""Logging setup for all entry points.

Two pieces:
- setup_logging(): one call per process. Timestamped log file + console.
- attach_run_log(): extra file handler inside an experiment's output
  directory, so every run directory carries its own log next to its CSVs.
"""

import logging
import os
from datetime import datetime

LOG_DIR = os.environ.get("LDFA_LOG_DIR", "logs")
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s - %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"
PACKAGE_LOGGER = "lowdim_feedback"

NOISY_LOGGERS = ["torch", "filelock", "fsspec"]


def _console_level(default: int) -> int:
    name = os.environ.get("LDFA_LOG_LEVEL")
    if not name:
        return default
    level = logging.getLevelName(name.upper())
    return level if isinstance(level, int) else default


def setup_logging(
    script_name: str,
    log_dir: str = LOG_DIR,
    console_level: int = logging.INFO,
) -> logging.Logger:
    """Configure logging for batch scripts.

    Creates: logs/{script_name}_{timestamp}.log
    File: DEBUG, Console: console_level (default INFO, LDFA_LOG_LEVEL overrides).
    """
    os.makedirs(log_dir, exist_ok=True)

    timestamp = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
    log_file = os.path.join(log_dir, f"{script_name}_{timestamp}.log")

    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT)

    file_handler = logging.FileHandler(log_file, encoding="utf-8")
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(formatter)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(_console_level(console_level))
    console_handler.setFormatter(formatter)

    logging.basicConfig(
        level=logging.DEBUG,
        handlers=[file_handler, console_handler],
        force=True,
    )

    for name in NOISY_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)

    print(f"Logging to: {log_file}")
    return logging.getLogger(PACKAGE_LOGGER)


def attach_run_log(out_dir: str, filename: str = "run.log") -> logging.Handler:
    """Mirror package log records into {out_dir}/{filename}.

    Returns the handler; pass it to detach_run_log() when the run ends.
    """
    os.makedirs(out_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(out_dir, filename), encoding="utf-8")
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT))
    logger = logging.getLogger(PACKAGE_LOGGER)
    logger.setLevel(logging.DEBUG)
    logger.addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    logging.getLogger(PACKAGE_LOGGER).removeHandler(handler)
    handler.close()
