import datetime
import functools
import os
from typing import Optional

import numpy as np

from constants import THREADS_ENV_VAR

SOURCE_DIRECTORY: os.PathLike = os.path.dirname(os.path.abspath(__file__))
PROJECT_DIRECTORY: os.PathLike = os.path.dirname(SOURCE_DIRECTORY)

def get_now_str() -> str:
    return datetime.datetime.now().strftime("%Y_%m_%d_%H_%M_%S")

@functools.lru_cache
def get_project_subdirectory(name: str) -> os.PathLike:
    absolute_path: os.PathLike = os.path.join(PROJECT_DIRECTORY, name)
    os.makedirs(absolute_path, exist_ok=True)
    return absolute_path

def get_log_directory() -> os.PathLike:
    return get_project_subdirectory("logs")

@functools.lru_cache
def get_experiment_logs_directory() -> os.PathLike:
    return get_project_subdirectory("experiment_logs")

def setup_experiment_directory(name: str, root: Optional[os.PathLike]=None) -> os.PathLike:
    """Create a fresh timestamped run directory `<root>/<name>/<now>`; `root` defaults
    to the project's experiment_logs directory.
    """
    now: str = get_now_str()
    root = root if root is not None else get_experiment_logs_directory()
    prefix_dir: os.PathLike = os.path.join(root, name)
    os.makedirs(prefix_dir, exist_ok=True)

    directory: os.PathLike = os.path.join(prefix_dir, now)
    suffix: int = 0
    while os.path.exists(directory):
        suffix += 1
        directory = os.path.join(prefix_dir, f"{now}_{suffix}")
    os.mkdir(directory)

    return directory

def ensure_directory(path: os.PathLike) -> os.PathLike:
    os.makedirs(path, exist_ok=True)
    return path

def get_num_threads() -> int:
    """Worker cap read from the PYRDIFF_THREADS environment variable (default: 1)."""
    raw: Optional[str] = os.environ.get(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return 1
    try:
        value: int = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV_VAR} must be a positive integer, got: {raw!r}")
    return max(1, value)

def derive_seed(*keys: int) -> int:
    """Deterministic child seed from an ordered tuple of integer keys."""
    sequence = np.random.SeedSequence([int(k) for k in keys])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])

def is_power_of_two(value: int) -> bool:
    return isinstance(value, (int, np.integer)) and value >= 1 and (int(value) & (int(value) - 1)) == 0
