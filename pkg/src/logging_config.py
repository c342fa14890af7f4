"""
Logging setup shared by the command line and the library modules
"""

import logging
import os
from datetime import datetime
from pathlib import Path

APP_LOGGER = "vitrl"
LOG_DIR = Path("logs")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
RUN_LOG_FILE = "train.log"

# chatty third-party loggers
QUIET_LOGGERS = ("kaleido", "choreographer", "torch")


def setup_logging(log_level="INFO", log_file=None):
    """
    Configure console and file logging for a training or evaluation session

    Args:
        log_level (str): Level name; the LOG_LEVEL environment variable wins
        log_file (str): Log destination, default logs/vitrl-YYYYMMDD.log

    Returns:
        logging.Logger: The application logger
    """
    level_name = os.getenv("LOG_LEVEL", log_level).upper()
    level = getattr(logging, level_name, logging.INFO)

    if log_file is None:
        LOG_DIR.mkdir(exist_ok=True)
        log_file = LOG_DIR / f"{APP_LOGGER}-{datetime.now():%Y%m%d}.log"
    else:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)

    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[logging.FileHandler(log_file, encoding="utf-8"), logging.StreamHandler()],
        force=True,
    )
    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)

    logger = logging.getLogger(APP_LOGGER)
    logger.info(f"Logging initialized - Level: {logging.getLevelName(level)}, File: {log_file}")
    return logger


def attach_run_log(run_dir):
    """Mirror application records into <run_dir>/train.log; returns the handler so callers can detach it"""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / RUN_LOG_FILE, encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger(APP_LOGGER).addHandler(handler)
    return handler


def get_logger(name):
    """Module logger under the application namespace"""
    return logging.getLogger(f"{APP_LOGGER}.{name}")
