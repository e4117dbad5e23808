"""In-process job registry with a single FIFO worker thread.

Training jobs are CPU-bound and share global torch thread settings, so they
run strictly one at a time; submitting while busy queues the job.
"""

from __future__ import annotations

import logging
import queue
import threading
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional

logger = logging.getLogger(__name__)


@dataclass
class Job:
    job_id: str
    kind: str
    fn: Callable[["Job"], dict]
    state: str = "queued"
    progress: Optional[dict] = None
    result: Optional[dict] = None
    error: Optional[str] = None
    lock: threading.Lock = field(default_factory=threading.Lock)

    def report(self, record: dict):
        with self.lock:
            self.progress = dict(record)

    def status(self) -> dict:
        with self.lock:
            return {
                "job_id": self.job_id,
                "kind": self.kind,
                "state": self.state,
                "progress": self.progress,
                "result": self.result,
                "error": self.error,
            }


class JobRegistry:
    def __init__(self):
        self._jobs: dict[str, Job] = {}
        self._queue: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._worker: Optional[threading.Thread] = None

    def _ensure_worker(self):
        if self._worker is None or not self._worker.is_alive():
            self._worker = threading.Thread(target=self._loop, daemon=True)
            self._worker.start()

    def _loop(self):
        while True:
            job = self._queue.get()
            with job.lock:
                job.state = "running"
            try:
                result = job.fn(job)
                with job.lock:
                    job.result = result
                    job.state = "done"
            except Exception as exc:  # surfaced through the status endpoint
                with job.lock:
                    job.error = f"{type(exc).__name__}: {exc}"
                    job.state = "error"
                logger.exception("job %s (%s) failed", job.job_id, job.kind)
            finally:
                self._queue.task_done()

    def submit(self, kind: str, fn: Callable[[Job], dict]) -> Job:
        job = Job(job_id=uuid.uuid4().hex[:12], kind=kind, fn=fn)
        with self._lock:
            self._jobs[job.job_id] = job
        self._queue.put(job)
        self._ensure_worker()
        return job

    def get(self, job_id: str) -> Optional[Job]:
        with self._lock:
            return self._jobs.get(job_id)

    def all_status(self):
        with self._lock:
            jobs = list(self._jobs.values())
        return [j.status() for j in jobs]

    def wait(self, job_id: str, timeout: float | None = None):
        """Block until the job leaves queued/running (test helper)."""
        import time

        job = self.get(job_id)
        deadline = None if timeout is None else time.time() + timeout
        while job is not None and job.status()["state"] in ("queued", "running"):
            if deadline is not None and time.time() > deadline:
                raise TimeoutError(f"job {job_id} still {job.status()['state']}")
            time.sleep(0.05)
        return job.status() if job else None
