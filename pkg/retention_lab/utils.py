import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Optional

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s: %(message)s"
ROOT = os.getcwd()


def format_datetime() -> str:
    """Return the current datetime formatted for use in directory names."""
    return datetime.now().strftime("%Y-%m-%d_%H-%M-%S")


def setup_logging(level: Optional[str] = None) -> None:
    """
    Configure the root logger once.

    The level comes from ``level`` if given, else from the
    ``RETENTION_LAB_LOG_LEVEL`` environment variable, else INFO.
    """
    name = level or os.getenv("RETENTION_LAB_LOG_LEVEL") or "INFO"
    logging.basicConfig(
        level=getattr(logging, name.upper(), logging.INFO),
        format=LOG_FORMAT,
    )


def default_run_dir(command: str) -> Path:
    """``<root>/<command>_<timestamp>`` where root is ``RETENTION_LAB_OUT`` or ./runs."""
    root = os.getenv("RETENTION_LAB_OUT") or os.path.join(ROOT, "runs")
    return Path(root) / f"{command}_{format_datetime()}"


def resolve_run_dir(out_dir: str, command: str) -> Path:
    path = Path(out_dir) if out_dir else default_run_dir(command)
    path.mkdir(parents=True, exist_ok=True)
    return path
