"""Serve loop: run one program per frame in a fresh namespace.

Frames are a 4-byte big-endian unsigned length followed by a UTF-8 JSON
object. Requests carry ``{"id", "source", "entry", "timeout_s"}``; every
well-formed frame gets exactly one reply ``{"id", "status", "answer",
"stderr", "duration_s"}``. Nothing persists between requests: each source
is compiled into its own namespace and the entry function is called with no
arguments, its return value converted with ``str``. Program writes to
stdout go to a capture buffer, never into the frame stream.

A soft wall-clock alarm answers ``timeout`` for busy loops that still
execute bytecode; the parent's hard kill remains the backstop for anything
stuck below the interpreter.
"""
from __future__ import annotations

import io
import json
import signal
import struct
import sys
import time
import traceback
from contextlib import redirect_stderr, redirect_stdout

STDERR_LIMIT = 2000
MAX_FRAME_BYTES = 64 * 1024 * 1024

STATUS_OK = "ok"
STATUS_TIMEOUT = "timeout"
STATUS_MEMORY = "memory"
STATUS_EXCEPTION = "exception"
STATUS_PROTOCOL_ERROR = "protocol_error"

_REQUIRED_KEYS = ("id", "source", "entry", "timeout_s")


class _SoftTimeout(BaseException):
    """Raised by the alarm handler; BaseException so programs that catch
    Exception cannot swallow it."""


def _alarm_handler(signum, frame):
    raise _SoftTimeout()


def enforce_limits(memory_limit_bytes: int | None, cpu_limit_s: float | None) -> None:
    """Install address-space and CPU-time rlimits where the platform allows;
    otherwise warn and rely on the parent's hard kill."""
    try:
        import resource
    except ImportError:
        print("resource limits unsupported on this platform", file=sys.stderr)
        return
    if memory_limit_bytes:
        try:
            resource.setrlimit(resource.RLIMIT_AS, (memory_limit_bytes, memory_limit_bytes))
        except (ValueError, OSError) as exc:
            print(f"could not set memory limit: {exc}", file=sys.stderr)
    if cpu_limit_s:
        seconds = max(1, int(cpu_limit_s + 1))
        try:
            resource.setrlimit(resource.RLIMIT_CPU, (seconds, seconds + 1))
        except (ValueError, OSError) as exc:
            print(f"could not set cpu limit: {exc}", file=sys.stderr)


def _read_exact(stream, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def _write_frame(stream, obj: dict) -> None:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    stream.write(struct.pack(">I", len(payload)) + payload)
    stream.flush()


def _reply(stream, request_id, status, answer=None, stderr="", duration=0.0) -> None:
    _write_frame(
        stream,
        {
            "id": request_id,
            "status": status,
            "answer": answer,
            "stderr": stderr[-STDERR_LIMIT:],
            "duration_s": round(duration, 6),
        },
    )


def _run_request(request: dict) -> tuple[str, str | None, str, float]:
    """(status, answer, stderr_excerpt, duration) for one request."""
    source = request["source"]
    entry = request["entry"]
    timeout_s = float(request["timeout_s"])

    captured_out = io.StringIO()
    captured_err = io.StringIO()
    namespace: dict = {"__name__": "__solution__"}
    start = time.monotonic()
    old_handler = signal.signal(signal.SIGALRM, _alarm_handler)
    if timeout_s > 0:
        signal.setitimer(signal.ITIMER_REAL, timeout_s)
    try:
        with redirect_stdout(captured_out), redirect_stderr(captured_err):
            code = compile(source, "<solution>", "exec")
            exec(code, namespace)
            fn = namespace.get(entry)
            if not callable(fn):
                raise NameError(f"entry function {entry!r} is not defined")
            result = fn()
        return STATUS_OK, str(result), captured_err.getvalue(), time.monotonic() - start
    except _SoftTimeout:
        return STATUS_TIMEOUT, None, f"soft timeout after {timeout_s}s", time.monotonic() - start
    except MemoryError:
        return STATUS_MEMORY, None, "MemoryError: allocation exceeded the memory limit", (
            time.monotonic() - start
        )
    except BaseException:
        detail = captured_err.getvalue() + traceback.format_exc(limit=10)
        return STATUS_EXCEPTION, None, detail, time.monotonic() - start
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0.0)
        signal.signal(signal.SIGALRM, old_handler)


def serve_loop(stdin=None, stdout=None) -> None:
    """Handle frames until stdin closes. Malformed frames are answered with
    ``protocol_error``; an unreadable length prefix ends the loop since the
    stream can no longer be trusted."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    # programs must never write into the frame stream
    sys.stdout = io.StringIO()

    while True:
        header = _read_exact(stdin, 4)
        if header is None:
            return
        (length,) = struct.unpack(">I", header)
        if length > MAX_FRAME_BYTES:
            _reply(stdout, "unknown", STATUS_PROTOCOL_ERROR, stderr=f"frame of {length} bytes refused")
            return
        payload = _read_exact(stdin, length)
        if payload is None:
            return
        try:
            request = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            _reply(stdout, "unknown", STATUS_PROTOCOL_ERROR, stderr=f"undecodable frame: {exc}")
            continue
        if not isinstance(request, dict) or any(k not in request for k in _REQUIRED_KEYS):
            request_id = request.get("id", "unknown") if isinstance(request, dict) else "unknown"
            _reply(stdout, request_id, STATUS_PROTOCOL_ERROR, stderr="missing required request keys")
            continue
        status, answer, stderr, duration = _run_request(request)
        _reply(stdout, request["id"], status, answer=answer, stderr=stderr, duration=duration)
