"""
Logging for training and evaluation runs.

Every module logs through ``get_logger(__name__)``: one line per record on stdout. While a CLI command
works on a run directory, the same lines are also appended to ``<run_dir>/run.log``, so a finished run
carries its own history next to ``metrics.jsonl`` and the checkpoints.
"""

import logging
import os
import sys
from datetime import datetime
from typing import List, Optional, Sequence

PACKAGE = "guided_slots"
RUN_LOG_NAME = "run.log"

# ANSI codes per level; console only
LEVEL_COLORS = {
    "DEBUG": "\033[36m",
    "INFO": "\033[32m",
    "WARNING": "\033[33m",
    "ERROR": "\033[31m",
    "CRITICAL": "\033[35m",
}
RESET = "\033[0m"


class StructuredFormatter(logging.Formatter):
    """
    ``[LEVEL] timestamp [logger] message`` lines, e.g.
    ``[INFO] 2024-05-01 12:00:00 [guided_slots.services.training_service] [OK] step 200 saved``.

    Colors are applied only when requested and stdout is a TTY; run logs never get them.
    """

    def __init__(self, use_colors: bool = True):
        super().__init__()
        self.use_colors = use_colors and sys.stdout.isatty()

    def format(self, record: logging.LogRecord) -> str:
        level = record.levelname
        if self.use_colors and level in LEVEL_COLORS:
            level = f"{LEVEL_COLORS[level]}[{level}]{RESET}"
        else:
            level = f"[{level}]"
        timestamp = datetime.fromtimestamp(record.created).strftime("%Y-%m-%d %H:%M:%S")
        line = f"{level} {timestamp} [{record.name}] {record.getMessage()}"
        if record.exc_info:
            line = f"{line} {self.formatException(record.exc_info)}"
        return line


class RunLogHandler(logging.FileHandler):
    """File handler owned by a run directory; ``detach_run_log`` removes exactly these."""


def _file_handler(path: str, level: int, cls=logging.FileHandler) -> logging.FileHandler:
    handler = cls(path, encoding="utf-8")
    handler.setLevel(level)
    handler.setFormatter(StructuredFormatter(use_colors=False))
    return handler


def setup_logger(
    name: str, level: Optional[str] = None, use_colors: bool = True, log_file: Optional[str] = None
) -> logging.Logger:
    """
    (Re)configure one logger with a stdout handler and, optionally, a plain-text file.

    Args:
        name: Logger name, normally the module's ``__name__``
        level: DEBUG, INFO, WARNING, ERROR or CRITICAL; defaults to ``$LOG_LEVEL`` or INFO
        use_colors: Color the level tag on a TTY
        log_file: Extra file receiving the same lines without colors

    Returns:
        The logger, with previous handlers replaced and propagation off
    """
    level = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, level, logging.INFO))
    logger.handlers.clear()

    console = logging.StreamHandler(sys.stdout)
    console.setLevel(logger.level)
    console.setFormatter(StructuredFormatter(use_colors=use_colors))
    logger.addHandler(console)
    if log_file:
        logger.addHandler(_file_handler(log_file, logger.level))

    logger.propagate = False
    return logger


def get_logger(name: str) -> logging.Logger:
    """
    Logger for a module, configured on first use.

    Example:
        from guided_slots.logger import get_logger
        logger = get_logger(__name__)
        logger.info("Rendering corpus")
    """
    logger = logging.getLogger(name)
    return logger if logger.handlers else setup_logger(name)


def _package_loggers(names: Optional[Sequence[str]]) -> List[logging.Logger]:
    if names is None:
        names = [n for n in logging.root.manager.loggerDict if n.startswith(PACKAGE)]
    return [logging.getLogger(n) for n in names]


def attach_run_log(run_dir: str, names: Optional[Sequence[str]] = None) -> str:
    """
    Mirror package loggers into ``<run_dir>/run.log``.

    Loggers already writing to that file are skipped, so reopening a run (resume, eval, plot)
    does not duplicate lines.

    Args:
        run_dir: Existing run directory
        names: Logger names to mirror; defaults to every ``guided_slots`` logger created so far

    Returns:
        Absolute path of the run log
    """
    path = os.path.abspath(os.path.join(run_dir, RUN_LOG_NAME))
    for logger in _package_loggers(names):
        if any(isinstance(h, RunLogHandler) and h.baseFilename == path for h in logger.handlers):
            continue
        logger.addHandler(_file_handler(path, logger.level, RunLogHandler))
    return path


def detach_run_log(run_dir: Optional[str] = None) -> int:
    """
    Close and remove run-log handlers: those of ``run_dir``, or all of them when it is None.

    Returns:
        Number of handlers removed
    """
    path = os.path.abspath(os.path.join(run_dir, RUN_LOG_NAME)) if run_dir is not None else None
    removed = 0
    for logger in _package_loggers(None):
        for handler in [h for h in logger.handlers if isinstance(h, RunLogHandler)]:
            if path is None or handler.baseFilename == path:
                logger.removeHandler(handler)
                handler.close()
                removed += 1
    return removed


# Command-line surface
cli_logger = setup_logger("guided_slots.cli")


__all__ = [
    "StructuredFormatter",
    "RunLogHandler",
    "setup_logger",
    "get_logger",
    "attach_run_log",
    "detach_run_log",
    "cli_logger",
]
