"""Code snippet execution for the solving loop.

Two implementations of one small interface: a scripted executor that
replays canned results (tests, offline replays), and a pool of
out-of-process runner workers reached over a line-delimited JSON
protocol.  Harness-level failures (a runner crash, an unresponsive
worker) are reported as error results whose stderr starts with
``[harness]``, so they stay distinguishable from errors raised by the
snippet itself.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import select
import subprocess
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

from .chain import ExecStatus, ExecutionResult

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_CAP_BYTES = 64 * 1024
DEFAULT_TIMEOUT_S = 10.0
DEFAULT_POOL_SIZE = 2
TRUNCATION_MARKER = "\n...[output truncated]"

HARNESS_PREFIX = "[harness]"


class ExecutorError(Exception):
    """Executor infrastructure failure."""


class BackpressureError(ExecutorError):
    """All workers stayed busy past the queue wait limit."""


class ExecutorConfigError(ExecutorError):
    """The runner command cannot be started at all."""


class Executor(Protocol):
    def execute(self, code: str) -> ExecutionResult: ...


def truncate_output(text: str, cap_bytes: int) -> str:
    """Clamp text to cap_bytes of UTF-8, appending a marker when cut."""
    if cap_bytes <= 0:
        raise ValueError("output cap must be positive")
    raw = text.encode("utf-8")
    if len(raw) <= cap_bytes:
        return text
    kept = raw[:cap_bytes].decode("utf-8", errors="ignore")
    return kept + TRUNCATION_MARKER


@dataclass(frozen=True, slots=True)
class ScriptedResult:
    """Scripted executor rule: applies when `match` occurs in the code."""

    match: str
    result: ExecutionResult


class ScriptedExecutor:
    """Replays canned execution results; first matching rule wins."""

    def __init__(self, rules: Sequence[ScriptedResult]) -> None:
        self._rules = list(rules)
        self.calls: list[str] = []

    def execute(self, code: str) -> ExecutionResult:
        self.calls.append(code)
        for rule in self._rules:
            if rule.match in code:
                return rule.result
        return ExecutionResult(
            status=ExecStatus.ERROR,
            stderr=f"{HARNESS_PREFIX} no scripted result for snippet",
        )


class _WorkerFailure(Exception):
    pass


class _Worker:
    def __init__(self, command: Sequence[str]) -> None:
        try:
            self.proc = subprocess.Popen(
                list(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
        except OSError as exc:
            raise ExecutorConfigError(f"cannot start runner {command!r}: {exc}") from exc
        self._buffer = b""

    def roundtrip(self, payload: dict, deadline_s: float) -> dict:
        if self.proc.poll() is not None:
            raise _WorkerFailure(f"runner exited with code {self.proc.returncode}")
        line = json.dumps(payload) + "\n"
        try:
            assert self.proc.stdin is not None
            self.proc.stdin.write(line.encode("utf-8"))
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise _WorkerFailure(f"runner pipe closed: {exc}") from exc
        raw = self._read_line(deadline_s)
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise _WorkerFailure(f"runner sent invalid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise _WorkerFailure("runner sent a non-object result")
        return obj

    def _read_line(self, deadline_s: float) -> bytes:
        assert self.proc.stdout is not None
        fd = self.proc.stdout.fileno()
        deadline = time.monotonic() + deadline_s
        while b"\n" not in self._buffer:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise _WorkerFailure(f"runner did not respond within {deadline_s:.1f}s")
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                continue
            chunk = os.read(fd, 65536)
            if not chunk:
                raise _WorkerFailure("runner closed its output stream")
            self._buffer += chunk
        line, self._buffer = self._buffer.split(b"\n", 1)
        return line

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:  # pragma: no cover
            pass


class SubprocessExecutor:
    """FIFO pool of runner processes speaking the line-JSON protocol.

    Each request is one line: {"code", "timeout_s", "allow_network"};
    each reply is one line: {"status", "stdout", "stderr", "wall_time_s"}.
    A crashed or unresponsive worker is replaced and the call reports a
    harness error; the pool stays usable.
    """

    # Extra wall time allowed past the snippet timeout before the worker
    # itself is declared unresponsive.
    HANG_GRACE_S = 3.0

    def __init__(
        self,
        command: Sequence[str],
        pool_size: int = DEFAULT_POOL_SIZE,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        output_cap_bytes: int = DEFAULT_OUTPUT_CAP_BYTES,
        allow_network: bool = False,
        queue_wait_s: float = 120.0,
    ) -> None:
        if pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        self._command = list(command)
        self._timeout_s = timeout_s
        self._cap = output_cap_bytes
        self._allow_network = allow_network
        self._queue_wait_s = queue_wait_s
        self._slots: queue.Queue[_Worker | None] = queue.Queue()
        for _ in range(pool_size):
            self._slots.put(None)
        self._closed = False

    def execute(self, code: str) -> ExecutionResult:
        if self._closed:
            raise ExecutorError("executor is closed")
        try:
            slot = self._slots.get(timeout=self._queue_wait_s)
        except queue.Empty:
            raise BackpressureError(
                f"no runner available within {self._queue_wait_s:.0f}s"
            ) from None
        worker: _Worker | None = None
        try:
            worker = slot if slot is not None else _Worker(self._command)
            payload = {
                "code": code,
                "timeout_s": self._timeout_s,
                "allow_network": self._allow_network,
            }
            obj = worker.roundtrip(payload, self._timeout_s + self.HANG_GRACE_S)
            result = self._parse_result(obj)
            self._slots.put(worker)
            return result
        except ExecutorConfigError:
            self._slots.put(None)
            raise
        except _WorkerFailure as failure:
            logger.warning("runner worker failed: %s", failure)
            if worker is not None:
                worker.kill()
            self._slots.put(None)
            return ExecutionResult(
                status=ExecStatus.ERROR,
                stderr=f"{HARNESS_PREFIX} {failure}",
            )

    def _parse_result(self, obj: dict) -> ExecutionResult:
        status_raw = obj.get("status")
        try:
            status = ExecStatus(status_raw)
        except ValueError:
            raise _WorkerFailure(f"runner sent unknown status {status_raw!r}") from None
        stdout = obj.get("stdout", "")
        stderr = obj.get("stderr", "")
        wall = obj.get("wall_time_s", 0.0)
        if not isinstance(stdout, str) or not isinstance(stderr, str):
            raise _WorkerFailure("runner sent non-string streams")
        if not isinstance(wall, (int, float)) or wall < 0:
            raise _WorkerFailure(f"runner sent bad wall_time_s {wall!r}")
        return ExecutionResult(
            status=status,
            stdout=truncate_output(stdout, self._cap),
            stderr=truncate_output(stderr, self._cap),
            wall_time=float(wall),
        )

    def close(self) -> None:
        self._closed = True
        while True:
            try:
                slot = self._slots.get_nowait()
            except queue.Empty:
                break
            if slot is not None:
                slot.kill()

    def __enter__(self) -> "SubprocessExecutor":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()
