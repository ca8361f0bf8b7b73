import logging
import os
import sys
from typing import Optional

from dotenv import load_dotenv
from tqdm import tqdm

load_dotenv()

LOG_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

_QUIET = ("matplotlib", "numba", "urllib3", "fsspec", "filelock")


class TqdmHandler(logging.Handler):
    """Writes records above any active training progress bar."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            tqdm.write(self.format(record), file=sys.stdout)
        except Exception:
            self.handleError(record)


def _parse_level(name: str) -> int:
    lvl = logging.getLevelName(name.upper())
    if not isinstance(lvl, int):
        raise ValueError(f"Unknown log level: {name}")
    return lvl


def _install_handler(level: Optional[str]) -> None:
    root = logging.getLogger()
    if any(isinstance(h, TqdmHandler) for h in root.handlers):
        return
    handler = TqdmHandler()
    handler.setFormatter(logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
    root.addHandler(handler)
    try:
        root.setLevel(_parse_level(level or os.getenv("LOG_LEVEL", "INFO")))
    except ValueError:
        root.setLevel(logging.INFO)
    for name in _QUIET:
        logging.getLogger(name).setLevel(logging.WARNING)


def get_logger(name: str, level: Optional[str] = None) -> logging.Logger:
    _install_handler(level)
    return logging.getLogger(name)


def set_level(level: str) -> None:
    """Override the root level, e.g. from ``--log-level``."""
    lvl = _parse_level(level)
    _install_handler(level)
    logging.getLogger().setLevel(lvl)
