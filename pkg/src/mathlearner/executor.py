"""Running candidate solution programs under resource limits.

Workers speak a length-prefixed frame protocol over stdin/stdout: a 4-byte
big-endian unsigned length, then a UTF-8 JSON object. Requests are
``{"id", "source", "entry", "timeout_s"}``; replies are ``{"id", "status",
"answer", "stderr", "duration_s"}``, correlated by id, one request in
flight per worker. The pool client here enforces the hard timeout by
killing the worker; the in-process stub serves the deterministic test path.
"""
from __future__ import annotations

import hashlib
import json
import logging
import queue
import select
import struct
import subprocess
import time
from dataclasses import dataclass

from .core import ENTRY_POINT, PipelineError

log = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_TIMEOUT = "timeout"
STATUS_MEMORY = "memory"
STATUS_EXCEPTION = "exception"
STATUS_PROTOCOL_ERROR = "protocol_error"
STATUSES = (STATUS_OK, STATUS_TIMEOUT, STATUS_MEMORY, STATUS_EXCEPTION, STATUS_PROTOCOL_ERROR)

GRACE_SECONDS = 2.0
STDERR_LIMIT = 2000


class UnscriptedSource(PipelineError):
    pass


class RunnerSpawnFailure(PipelineError):
    pass


class ExecutorUnavailable(PipelineError):
    pass


@dataclass(frozen=True)
class ExecutionRequest:
    request_id: str
    source: str
    timeout: float
    memory_limit: int
    entry_point: str = ENTRY_POINT

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if not self.source:
            raise ValueError("source must be non-empty")


@dataclass(frozen=True)
class ExecutionOutcome:
    request_id: str
    status: str
    answer_text: str | None = None
    stderr_excerpt: str = ""
    duration: float = 0.0

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == STATUS_OK and self.answer_text is None:
            raise ValueError("ok outcomes must carry answer text")


def source_hash(source: str) -> str:
    return hashlib.sha256(source.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Frame codec
# ---------------------------------------------------------------------------

def encode_frame(obj: dict) -> bytes:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(payload)) + payload


def _read_exact(fileobj, n: int, deadline: float) -> bytes | None:
    """Read exactly ``n`` bytes before ``deadline`` (monotonic), else None."""
    buf = b""
    fd = fileobj.fileno()
    while len(buf) < n:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return None
        ready, _, _ = select.select([fd], [], [], min(remaining, 0.5))
        if not ready:
            continue
        chunk = fileobj.read1(n - len(buf)) if hasattr(fileobj, "read1") else fileobj.read(n - len(buf))
        if not chunk:
            return None  # EOF: worker died
        buf += chunk
    return buf


def read_frame(fileobj, deadline: float) -> dict | None:
    """One frame before ``deadline``; None on timeout/EOF; raises ValueError
    on undecodable payloads."""
    header = _read_exact(fileobj, 4, deadline)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    payload = _read_exact(fileobj, length, deadline)
    if payload is None:
        return None
    return json.loads(payload.decode("utf-8"))


# ---------------------------------------------------------------------------
# Stub executor
# ---------------------------------------------------------------------------

class StubExecutor:
    """Deterministic executor double keyed by source hash; spawns nothing."""

    def __init__(self, script: dict[str, ExecutionOutcome] | None = None) -> None:
        self._script = dict(script or {})

    def script_source(self, source: str, outcome: ExecutionOutcome) -> None:
        self._script[source_hash(source)] = outcome

    def execute(self, request: ExecutionRequest) -> ExecutionOutcome:
        key = source_hash(request.source)
        if key not in self._script:
            raise UnscriptedSource(f"no scripted outcome for source hash {key[:12]}...")
        outcome = self._script[key]
        return ExecutionOutcome(
            request_id=request.request_id,
            status=outcome.status,
            answer_text=outcome.answer_text,
            stderr_excerpt=outcome.stderr_excerpt,
            duration=outcome.duration,
        )

    def close(self) -> None:
        pass


def ok_outcome(answer_text: str) -> ExecutionOutcome:
    return ExecutionOutcome(request_id="", status=STATUS_OK, answer_text=answer_text)


def error_outcome(status: str, stderr: str = "") -> ExecutionOutcome:
    return ExecutionOutcome(request_id="", status=status, stderr_excerpt=stderr)


# ---------------------------------------------------------------------------
# Worker pool
# ---------------------------------------------------------------------------

class _Worker:
    def __init__(self, cmd: list[str]) -> None:
        try:
            self.proc = subprocess.Popen(
                cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
        except OSError as exc:
            raise RunnerSpawnFailure(f"could not spawn {cmd!r}: {exc}") from exc

    def alive(self) -> bool:
        return self.proc.poll() is None

    def kill(self) -> None:
        try:
            self.proc.kill()
            self.proc.wait(timeout=5)
        except Exception:  # already gone
            pass
        for stream in (self.proc.stdin, self.proc.stdout):
            try:
                if stream:
                    stream.close()
            except OSError:
                pass


class PoolExecutor:
    """Multiplexes execute() calls over a pool of persistent worker processes.

    A worker handles one request at a time and is recycled after any non-ok
    outcome, so a wedged program can never poison later requests.
    """

    def __init__(
        self,
        worker_cmd: list[str],
        pool_size: int = 4,
        memory_limit: int = 512 * 1024 * 1024,
        grace: float = GRACE_SECONDS,
    ) -> None:
        if pool_size < 1:
            raise ValueError("pool_size must be at least 1")
        self._cmd = list(worker_cmd) + [f"--memory-limit-bytes={memory_limit}"]
        self._grace = grace
        self._slots: queue.Queue = queue.Queue()
        for _ in range(pool_size):
            self._slots.put(None)  # lazily spawned
        self._closed = False

    def _checkout(self) -> _Worker:
        worker = self._slots.get()
        try:
            if worker is None or not worker.alive():
                if worker is not None:
                    worker.kill()
                worker = _Worker(self._cmd)
        except RunnerSpawnFailure:
            self._slots.put(None)  # keep the pool at full capacity
            raise
        return worker

    def execute(self, request: ExecutionRequest) -> ExecutionOutcome:
        if self._closed:
            raise ExecutorUnavailable("pool is closed")
        worker = self._checkout()
        recycle = True
        started = time.monotonic()
        try:
            frame = encode_frame(
                {
                    "id": request.request_id,
                    "source": request.source,
                    "entry": request.entry_point,
                    "timeout_s": request.timeout,
                }
            )
            try:
                worker.proc.stdin.write(frame)
                worker.proc.stdin.flush()
            except (OSError, ValueError):
                return ExecutionOutcome(
                    request_id=request.request_id,
                    status=STATUS_PROTOCOL_ERROR,
                    stderr_excerpt="worker rejected request frame",
                    duration=time.monotonic() - started,
                )
            deadline = started + request.timeout + self._grace
            try:
                reply = read_frame(worker.proc.stdout, deadline)
            except (ValueError, json.JSONDecodeError):
                reply = {}
            duration = time.monotonic() - started
            if reply is None:
                worker.kill()
                return ExecutionOutcome(
                    request_id=request.request_id,
                    status=STATUS_TIMEOUT,
                    stderr_excerpt=f"no reply within {request.timeout}s + {self._grace}s grace",
                    duration=duration,
                )
            outcome = self._outcome_from_reply(request, reply, duration)
            recycle = outcome.status != STATUS_OK
            return outcome
        finally:
            if recycle:
                worker.kill()
                self._slots.put(None)
            else:
                self._slots.put(worker)

    @staticmethod
    def _outcome_from_reply(request: ExecutionRequest, reply: dict, duration: float) -> ExecutionOutcome:
        if (
            not isinstance(reply, dict)
            or reply.get("id") != request.request_id
            or reply.get("status") not in STATUSES
        ):
            return ExecutionOutcome(
                request_id=request.request_id,
                status=STATUS_PROTOCOL_ERROR,
                stderr_excerpt=f"malformed reply: {str(reply)[:200]}",
                duration=duration,
            )
        status = reply["status"]
        answer = reply.get("answer")
        if status == STATUS_OK and not isinstance(answer, str):
            return ExecutionOutcome(
                request_id=request.request_id,
                status=STATUS_PROTOCOL_ERROR,
                stderr_excerpt="ok reply without answer text",
                duration=duration,
            )
        return ExecutionOutcome(
            request_id=request.request_id,
            status=status,
            answer_text=answer if status == STATUS_OK else None,
            stderr_excerpt=str(reply.get("stderr", ""))[:STDERR_LIMIT],
            duration=float(reply.get("duration_s", duration)),
        )

    def close(self) -> None:
        self._closed = True
        while True:
            try:
                worker = self._slots.get_nowait()
            except queue.Empty:
                break
            if worker is not None:
                worker.kill()
