"""Logging setup shared by the CLI and scripts."""

import logging
from pathlib import Path
from typing import Optional, Union

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(level: str = "INFO", log_file: Optional[Union[str, Path]] = None) -> None:
    """Configure root logging; optionally mirror records into a sidecar log file"""
    numeric_level = getattr(logging, level.upper(), logging.INFO)
    logging.basicConfig(level=numeric_level, format=LOG_FORMAT)
    root = logging.getLogger()
    root.setLevel(numeric_level)

    # one sidecar per process; a new run replaces the previous one
    for handler in list(root.handlers):
        if getattr(handler, "_mixttt_sidecar", False):
            root.removeHandler(handler)
            handler.close()

    if log_file is None:
        return

    log_path = Path(log_file)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(log_path, encoding="utf-8")
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    file_handler._mixttt_sidecar = True  # type: ignore[attr-defined]
    root.addHandler(file_handler)
