""" Async streaming and worker-thread utilities.

This module provides helpers that run blocking experiment work from an async
context without blocking the event loop:

- `progress_lines_async` / `stream_run_progress` expose a run's blocking
  NDJSON progress generator (one line per finished job, then the manifest)
  as a FastAPI StreamingResponse.
- `gather_in_threads` / `run_jobs` fan independent blocking jobs (one per
  seed and mode) out to worker threads under a capacity limit, returning the
  results in submission order regardless of completion order.
"""
from typing import AsyncGenerator, Callable, Iterator, Protocol, Sequence, TypeVar

import anyio
from anyio import CapacityLimiter, create_task_group, to_thread
from fastapi.responses import StreamingResponse

T = TypeVar("T")


class ProgressSource(Protocol):
    def stream(self) -> Iterator[bytes]: ...


async def progress_lines_async(lines: Iterator[bytes]) -> AsyncGenerator[bytes, None]:
    """
    Re-yield a run's NDJSON progress lines from an async context.

    Each `next()` on the blocking iterator (which may run a whole job) is
    executed in a worker thread via `anyio.to_thread.run_sync`.

    Args:
        lines (Iterator[bytes]): Encoded progress lines, none of them None.

    Yields:
        bytes: The same lines, in order.
    """
    while True:
        line = await to_thread.run_sync(lambda: next(lines, None))
        if line is None:
            break
        yield line


async def stream_run_progress(runner: ProgressSource) -> StreamingResponse:
    """
    Start `runner.stream()` in a worker thread and stream its progress as NDJSON.

    The run directory is prepared by the first line ("started"); the last
    line carries the manifest and exit code.

    Args:
        runner (ProgressSource): An experiment runner built from a validated config.

    Returns:
        StreamingResponse: application/x-ndjson body of progress lines.
    """
    lines = await to_thread.run_sync(runner.stream)
    return StreamingResponse(progress_lines_async(lines), media_type="application/x-ndjson")


async def gather_in_threads(jobs: Sequence[Callable[[], T]], limit: int) -> list[T]:
    """
    Run blocking callables in worker threads, at most `limit` at a time.

    Args:
        jobs (Sequence[Callable[[], T]]): Zero-argument callables.
        limit (int): Maximum number of concurrently running jobs.

    Returns:
        list[T]: Results, in the order of `jobs`.
    """
    limiter = CapacityLimiter(max(1, limit))
    results: list[T | None] = [None] * len(jobs)

    async def worker(position: int, job: Callable[[], T]) -> None:
        results[position] = await to_thread.run_sync(job, limiter=limiter)

    async with create_task_group() as tg:
        for position, job in enumerate(jobs):
            tg.start_soon(worker, position, job)
    return results


def run_jobs(jobs: Sequence[Callable[[], T]], limit: int) -> list[T]:
    """Blocking entry point for `gather_in_threads`; runs its own event loop."""
    if limit <= 1:
        return [job() for job in jobs]
    return anyio.run(gather_in_threads, jobs, limit)
