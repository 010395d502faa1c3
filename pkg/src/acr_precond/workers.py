"""Worker utilities for concurrent block eliminations and sweep points."""

from concurrent.futures import ThreadPoolExecutor
from threading import Lock
from typing import Any, Callable, List, Optional, Sequence

import structlog

logger = structlog.get_logger()

ProgressCallback = Callable[[int, str], None]


class OperationProgress:
    """Tracks progress of long-running operations."""

    def __init__(self, total_steps: int):
        self.total_steps = total_steps
        self.current_step = 0
        self.status_message = ""
        self._lock = Lock()

    def advance(self, message: str = "") -> int:
        """Count one finished step and return the new step number."""
        with self._lock:
            self.current_step += 1
            self.status_message = message
            return self.current_step

    @property
    def percentage(self) -> int:
        """Get progress as percentage."""
        if self.total_steps == 0:
            return 100
        return int((self.current_step / self.total_steps) * 100)


def run_concurrently(
    tasks: Sequence[Callable[[], Any]],
    max_workers: int = 1,
    progress_callback: Optional[ProgressCallback] = None,
    name: str = "tasks",
) -> List[Any]:
    """Run independent zero-argument tasks and return their results in task order.

    With max_workers <= 1 the tasks run sequentially in the calling thread. Exceptions
    propagate to the caller after all submitted tasks finished.
    """
    progress = OperationProgress(len(tasks))

    def _run(task: Callable[[], Any]) -> Any:
        result = task()
        step = progress.advance()
        if progress_callback:
            progress_callback(progress.percentage, f"{name}: {step}/{progress.total_steps}")
        return result

    if max_workers <= 1 or len(tasks) <= 1:
        return [_run(task) for task in tasks]

    logger.debug("Running tasks concurrently", name=name, tasks=len(tasks), workers=max_workers)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(_run, task) for task in tasks]
        return [future.result() for future in futures]
