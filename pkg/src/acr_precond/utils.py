"""Utility functions for files, timing and fits."""

import json
import statistics
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Sequence, Tuple

import numpy as np
import structlog

from .exceptions import ExportError

logger = structlog.get_logger()


def load_json_file(filepath: Path) -> Dict[str, Any]:
    """Load JSON from file, return empty dict if file doesn't exist."""
    try:
        with open(filepath, 'r', encoding='utf-8') as f:
            content = json.load(f)
            logger.debug("Loaded JSON file", path=str(filepath))
            return content
    except FileNotFoundError:
        logger.info("JSON file not found", path=str(filepath))
        return {}
    except json.JSONDecodeError as e:
        logger.error("Invalid JSON in file", path=str(filepath), error=str(e))
        raise ExportError(f"invalid JSON in {filepath}: {e}", file_path=str(filepath))


def save_json_file(filepath: Path, data: Dict[str, Any], indent: int = 2) -> None:
    """Save data to JSON file."""
    try:
        ensure_directory_exists(filepath.parent)
        with open(filepath, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=indent, ensure_ascii=False, default=str)
        logger.info("Saved JSON file", path=str(filepath))
    except OSError as e:
        logger.error("Error saving JSON file", path=str(filepath), error=str(e))
        raise ExportError(f"cannot write {filepath}: {e}", file_path=str(filepath))


def ensure_directory_exists(path: Path) -> None:
    """Ensure directory exists, create if it doesn't."""
    if not path.exists():
        path.mkdir(parents=True, exist_ok=True)
        logger.info("Created directory", path=str(path))


def timed(func: Callable[..., Any], *args: Any, **kwargs: Any) -> Tuple[Any, float]:
    """Call func and return (result, elapsed wall-clock seconds)."""
    start = time.perf_counter()
    result = func(*args, **kwargs)
    return result, time.perf_counter() - start


def median_seconds(func: Callable[[], Any], repeats: int = 3) -> float:
    """Median wall-clock time of repeated calls."""
    samples: List[float] = []
    for _ in range(max(1, repeats)):
        _, elapsed = timed(func)
        samples.append(elapsed)
    return statistics.median(samples)


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(ys) against log(xs)."""
    x = np.log(np.asarray(xs, dtype=float))
    y = np.log(np.asarray(ys, dtype=float))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)
