#!/usr/bin/env python3
"""
Benchmark Logs Setup
Creates the logs directory and configures console + file logging for runs.
Run directly to prepare the directory before launching long experiments.
"""

import os
import sys
import logging
from pathlib import Path
from typing import Iterable, Optional, Union

from config import config

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
DEFAULT_LOG_FILES = ("run.log",)

_configured_handlers = []


def setup_logs_directory(log_dir: Optional[Union[str, Path]] = None,
                         log_files: Iterable[str] = DEFAULT_LOG_FILES) -> Path:
    """Create the logs directory and empty log files with 755/644 permissions."""
    logs_dir = Path(log_dir or config.BENCH_LOG_DIR)
    logs_dir.mkdir(parents=True, exist_ok=True, mode=0o755)
    for log_file in log_files:
        log_path = logs_dir / log_file
        if not log_path.exists():
            log_path.touch()
        if log_path.is_file():
            os.chmod(log_path, 0o644)
    return logs_dir


def configure_logging(level: Optional[str] = None,
                      log_dir: Optional[Union[str, Path]] = None,
                      filename: str = "run.log") -> None:
    """
    Attach a console handler and a UTF-8 file handler to the root logger.

    Calling again replaces the handlers installed by the previous call, so the
    CLI and tests can reconfigure without duplicating output.
    """
    logs_dir = setup_logs_directory(log_dir, (filename,))
    root = logging.getLogger()
    for handler in _configured_handlers:
        root.removeHandler(handler)
        handler.close()
    _configured_handlers.clear()

    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
    handlers = [
        logging.StreamHandler(),
        logging.FileHandler(logs_dir / filename, encoding="utf-8"),
    ]
    for handler in handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
        _configured_handlers.append(handler)
    root.setLevel(getattr(logging, (level or config.BENCH_LOG_LEVEL).upper(), logging.INFO))


if __name__ == "__main__":
    try:
        path = setup_logs_directory()
        print(f"✅ Logs directory ready: {path}")
    except OSError as e:
        print(f"❌ Error setting up logs directory: {e}")
        sys.exit(1)
