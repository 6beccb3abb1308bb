import logging
from logging.handlers import TimedRotatingFileHandler
import os

from app.config import LOG_CONFIG


def setup_logging(log_dir=None, level=None):
    """
    Sets up a timed rotating file logger plus console output on the root logger.

    Args:
        log_dir (str | None): Directory for the log file; defaults to logs/ at the project root.
        level (str | int | None): Log level; defaults to LOG_CONFIG['level'].

    Returns:
        str: Path of the log file.
    """
    if log_dir is None:
        log_dir = os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(__file__))), LOG_CONFIG["log_dir_name"])
    os.makedirs(log_dir, exist_ok=True)
    log_file = os.path.join(log_dir, LOG_CONFIG["log_filename"])
    level = level or LOG_CONFIG["level"]
    if isinstance(level, str):
        level = getattr(logging, level.upper())

    logger = logging.getLogger()
    logger.setLevel(level)
    formatter = logging.Formatter(LOG_CONFIG["format"])

    # Rotates at midnight, keeps a week of backups
    if not any(isinstance(h, TimedRotatingFileHandler) for h in logger.handlers):
        handler = TimedRotatingFileHandler(log_file, when="midnight", interval=1, backupCount=LOG_CONFIG["backup_count"])
        handler.setLevel(level)
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    # Console output; the file handler is a StreamHandler subclass too
    if not any(type(h) is logging.StreamHandler for h in logger.handlers):
        console_handler = logging.StreamHandler()
        console_handler.setLevel(level)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    logging.info("Logging setup complete.")
    return log_file
