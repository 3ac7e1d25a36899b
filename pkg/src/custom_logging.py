import csv
import logging
import os
from typing import Optional, Sequence

from utils import get_log_directory, get_now_str

PROJECT_LOGGER: str = "pyrdiff"

def setup_logger(name: str, level: int = logging.INFO, custom_handle: os.PathLike=None) -> logging.Logger:
    """Instantiate and configure a logger given a module name and (optionally)
    some configuration options like the logging level.
    Parameters
    ----------
    name: str
        name for the logger; commands and experiments use the project logger name
        "pyrdiff" so that library modules (see `get_logger`) write into the same handlers.
    level: int {10, 20, 30}
        integer-valued log level in set {10, 20, 30} (you can use the logging.{INFO, WARN, DEBUG}
        aliases). (default: 20/logging.INFO)
    custom_handle: path_t
        optional path to provide for the file handler (default: a timestamped file in
        the project `logs` directory).
    Note
    ----
    Handlers are attached only on the first call for a given name; later calls return
    the configured logger unchanged.
    """
    logger = logging.getLogger(name)

    if not getattr(logger, "handler_set", None):
        log_file: os.PathLike = custom_handle if custom_handle is not None else os.path.join(get_log_directory(), get_now_str() + ".out")
        file_handler = logging.FileHandler(log_file)

        fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
        file_handler.setFormatter(fmt)

        console = logging.StreamHandler()
        console.setLevel(level)
        console.setFormatter(fmt)

        logger.addHandler(file_handler)
        logger.addHandler(console)
        logger.setLevel(level)

        # --- don't add more handlers next time
        logger.handler_set = True
        logger.propagate = False

    return logger

def get_logger(module_name: str) -> logging.Logger:
    """Child of the project logger; silent until `setup_logger(PROJECT_LOGGER)` runs."""
    return logging.getLogger(f"{PROJECT_LOGGER}.{module_name}")

class CsvLog:
    """Row-per-call CSV writer, flushed after every row so interrupted runs keep their history."""

    def __init__(self, path: os.PathLike, fieldnames: Sequence[str], append: Optional[bool]=False):
        self.path = path
        self.fieldnames = list(fieldnames)
        exists: bool = os.path.exists(path) and os.path.getsize(path) > 0
        self._handle = open(path, "a" if append else "w", newline="")
        self._writer = csv.DictWriter(self._handle, fieldnames=self.fieldnames)
        if not (append and exists):
            self._writer.writeheader()
            self._handle.flush()

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(path={self.path}, fieldnames={self.fieldnames})"

    def write(self, **row) -> None:
        self._writer.writerow(row)
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "CsvLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

def truncate_csv(path: os.PathLike, num_rows: int) -> None:
    """Keep the header plus the first `num_rows` data rows (used when resuming a run)."""
    if not os.path.exists(path):
        return
    with open(path, newline="") as handle:
        lines = handle.readlines()
    with open(path, "w", newline="") as handle:
        handle.writelines(lines[:num_rows + 1])
