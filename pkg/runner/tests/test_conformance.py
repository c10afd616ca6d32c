"""Wire-protocol conformance of the runner, driven over a real subprocess.

These tests speak the frame protocol directly (4-byte big-endian length +
UTF-8 JSON) so they certify the worker against the protocol itself, not
against any client library.
"""
from __future__ import annotations

import json
import os
import select
import struct
import subprocess
import sys
import time
from pathlib import Path

import pytest

SRC_DIR = Path(__file__).resolve().parents[1] / "src"

MIB = 1024 * 1024


class Worker:
    def __init__(self, *args: str):
        env = dict(os.environ)
        env["PYTHONPATH"] = str(SRC_DIR) + os.pathsep + env.get("PYTHONPATH", "")
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "sandbox_runner", *args],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            env=env,
        )

    def send(self, obj: dict) -> None:
        payload = json.dumps(obj).encode("utf-8")
        self.proc.stdin.write(struct.pack(">I", len(payload)) + payload)
        self.proc.stdin.flush()

    def send_raw(self, data: bytes) -> None:
        self.proc.stdin.write(data)
        self.proc.stdin.flush()

    def _read_exact(self, n: int, deadline: float) -> bytes:
        fd = self.proc.stdout.fileno()
        buf = b""
        while len(buf) < n:
            remaining = deadline - time.monotonic()
            assert remaining > 0, f"no reply within deadline (got {len(buf)}/{n} bytes)"
            ready, _, _ = select.select([fd], [], [], min(remaining, 0.5))
            if not ready:
                continue
            chunk = os.read(fd, n - len(buf))
            assert chunk, "worker closed stdout"
            buf += chunk
        return buf

    def recv(self, timeout: float = 10.0) -> dict:
        deadline = time.monotonic() + timeout
        (length,) = struct.unpack(">I", self._read_exact(4, deadline))
        return json.loads(self._read_exact(length, deadline).decode("utf-8"))

    def close(self) -> None:
        try:
            self.proc.stdin.close()
            self.proc.wait(timeout=5)
        except Exception:
            self.proc.kill()


@pytest.fixture()
def worker():
    w = Worker("--memory-limit-bytes", str(512 * MIB))
    yield w
    w.close()


def _request(source, request_id="r1", entry="solve", timeout_s=5.0):
    return {"id": request_id, "source": source, "entry": entry, "timeout_s": timeout_s}


def test_simple_arithmetic_under_one_second(worker):
    start = time.monotonic()
    worker.send(_request("def solve(): return 2+2"))
    reply = worker.recv(timeout=5.0)
    elapsed = time.monotonic() - start
    assert reply == {
        "id": "r1",
        "status": "ok",
        "answer": "4",
        "stderr": "",
        "duration_s": reply["duration_s"],
    }
    assert elapsed < 1.0


def test_busy_loop_times_out_within_four_seconds(worker):
    start = time.monotonic()
    worker.send(_request("def solve():\n    while True:\n        pass\n", timeout_s=2.0))
    reply = worker.recv(timeout=4.0)
    elapsed = time.monotonic() - start
    assert reply["status"] == "timeout"
    assert reply["answer"] is None
    assert elapsed <= 4.0


def test_namespace_isolation_between_requests(worker):
    worker.send(_request("LEAK = 42\ndef solve(): return LEAK", request_id="first"))
    first = worker.recv()
    assert first["status"] == "ok" and first["answer"] == "42"

    worker.send(_request("def solve(): return LEAK", request_id="second"))
    second = worker.recv()
    assert second["id"] == "second"
    assert second["status"] == "exception"
    assert "LEAK" in second["stderr"] or "NameError" in second["stderr"]


def test_allocation_bomb_hits_memory_limit(worker):
    worker.send(_request("def solve():\n    return len(bytearray(1 << 30))\n", timeout_s=10.0))
    reply = worker.recv(timeout=12.0)
    assert reply["status"] in ("memory", "exception")
    assert reply["status"] != "ok"


def test_syntax_error_reports_compiler_message(worker):
    worker.send(_request("def solve( return 4"))
    reply = worker.recv()
    assert reply["status"] == "exception"
    assert "SyntaxError" in reply["stderr"]


def test_missing_entry_key_is_protocol_error(worker):
    worker.send({"id": "r9", "source": "def solve(): return 1", "timeout_s": 1.0})
    reply = worker.recv()
    assert reply["id"] == "r9"
    assert reply["status"] == "protocol_error"
    # worker keeps serving afterwards
    worker.send(_request("def solve(): return 7", request_id="next"))
    assert worker.recv()["answer"] == "7"


def test_undecodable_payload_is_protocol_error(worker):
    garbage = b"\xff\xfe\xfd\xfc"
    worker.send_raw(struct.pack(">I", len(garbage)) + garbage)
    reply = worker.recv()
    assert reply["status"] == "protocol_error"
    worker.send(_request("def solve(): return 8", request_id="after"))
    assert worker.recv()["answer"] == "8"


def test_prints_do_not_corrupt_framing(worker):
    source = "def solve():\n    print('log noise ' * 10)\n    return 'clean'\n"
    worker.send(_request(source))
    reply = worker.recv()
    assert reply["status"] == "ok"
    assert reply["answer"] == "clean"


def test_missing_entry_function_is_exception(worker):
    worker.send(_request("x = 1", entry="solve"))
    reply = worker.recv()
    assert reply["status"] == "exception"
    assert "solve" in reply["stderr"]


def test_answer_is_return_value_string(worker):
    worker.send(_request("from fractions import Fraction\ndef solve(): return Fraction(3, 4)"))
    reply = worker.recv()
    assert reply["status"] == "ok"
    assert reply["answer"] == "3/4"


def test_every_frame_gets_exactly_one_reply_with_matching_id(worker):
    for i in range(5):
        worker.send(_request(f"def solve(): return {i}", request_id=f"seq{i}"))
        reply = worker.recv()
        assert reply["id"] == f"seq{i}"
        assert reply["answer"] == str(i)
