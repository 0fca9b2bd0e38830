"""Out-of-process snippet runner.

A warm worker loop: one JSON object per stdin line describes a snippet
({"code", "timeout_s", "allow_network"}), and exactly one JSON object
per stdout line reports what happened ({"status", "stdout", "stderr",
"wall_time_s"}), whatever the input was.  Each snippet executes in a
forked child with a fresh namespace, so runs share no state; the parent
kills the child at the deadline and answers status "timeout".

Sandboxing here is cooperative, not adversarial: the child's stdin is
/dev/null, its stdout/stderr are captured at the file-descriptor level,
and socket construction is disabled unless the request allows network.
Snippets that fight the harness are out of scope.
"""

from __future__ import annotations

import json
import os
import selectors
import signal
import sys
import time
import traceback

MAX_TIMEOUT_S = 120.0
# Per-stream capture cap; the pipe keeps draining past it so the child
# never blocks, but excess bytes are dropped.
MAX_STREAM_BYTES = 8 * 1024 * 1024
# After the child exits, grandchildren may still hold the pipes open;
# stop waiting for EOF this long after the exit is observed.
LINGER_S = 0.2

STATUS_OK = "ok"
STATUS_ERROR = "error"
STATUS_TIMEOUT = "timeout"


class RequestError(Exception):
    """The request line cannot be executed as written."""


def _error_reply(message: str) -> dict:
    return {
        "status": STATUS_ERROR,
        "stdout": "",
        "stderr": f"[runner] {message}",
        "wall_time_s": 0.0,
    }


def parse_request(line: bytes | str) -> dict:
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise RequestError(f"request is not UTF-8: {exc}") from exc
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RequestError(f"bad request JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise RequestError("request must be a JSON object")
    code = obj.get("code")
    if not isinstance(code, str):
        raise RequestError("request needs a string 'code' field")
    timeout_raw = obj.get("timeout_s", 10.0)
    if isinstance(timeout_raw, bool) or not isinstance(timeout_raw, (int, float)):
        raise RequestError("'timeout_s' must be a number")
    timeout_s = float(timeout_raw)
    if not 0 < timeout_s <= MAX_TIMEOUT_S:
        raise RequestError(f"'timeout_s' must be in (0, {MAX_TIMEOUT_S:.0f}]")
    allow_network = obj.get("allow_network", False)
    if not isinstance(allow_network, bool):
        raise RequestError("'allow_network' must be a boolean")
    return {"code": code, "timeout_s": timeout_s, "allow_network": allow_network}


def _disable_network() -> None:
    import socket

    def _blocked(*args, **kwargs):
        raise OSError("network disabled in this runner")

    socket.socket = _blocked
    socket.socketpair = _blocked
    socket.create_connection = _blocked
    socket.create_server = _blocked
    socket.fromfd = _blocked


def _child_main(code: str, allow_network: bool, out_fd: int, err_fd: int) -> None:
    # Runs only in the forked child; must end in os._exit so no parent
    # state (buffers, atexit hooks) replays.
    exit_code = 1
    try:
        devnull = os.open(os.devnull, os.O_RDONLY)
        os.dup2(devnull, 0)
        os.close(devnull)
        os.dup2(out_fd, 1)
        os.dup2(err_fd, 2)
        os.close(out_fd)
        os.close(err_fd)
        sys.stdin = open(0, "r", encoding="utf-8", closefd=False)
        sys.stdout = open(1, "w", encoding="utf-8", closefd=False)
        sys.stderr = open(2, "w", encoding="utf-8", closefd=False)
        if not allow_network:
            _disable_network()
        namespace = {"__name__": "__main__", "__builtins__": __builtins__}
        try:
            exec(compile(code, "<snippet>", "exec"), namespace)
            exit_code = 0
        except SystemExit as exc:
            # Same contract as running a script: int code passes through,
            # None means success, anything else prints and exits 1.
            if exc.code is None:
                exit_code = 0
            elif isinstance(exc.code, int):
                exit_code = exc.code
            else:
                print(exc.code, file=sys.stderr)
                exit_code = 1
        except BaseException:
            # Drop the frame for the exec call above; the snippet should
            # only ever see its own frames in a traceback.
            _, value, tb = sys.exc_info()
            traceback.print_exception(
                type(value), value, tb.tb_next if tb else None
            )
            exit_code = 1
    finally:
        try:
            sys.stdout.flush()
            sys.stderr.flush()
        except Exception:
            pass
        os._exit(exit_code)


def run_snippet(code: str, timeout_s: float, allow_network: bool = False) -> dict:
    """Execute one snippet in a forked child and report the outcome."""
    out_read, out_write = os.pipe()
    err_read, err_write = os.pipe()
    started = time.monotonic()
    pid = os.fork()
    if pid == 0:
        os.close(out_read)
        os.close(err_read)
        _child_main(code, allow_network, out_write, err_write)
        os._exit(1)  # unreachable

    os.close(out_write)
    os.close(err_write)
    os.set_blocking(out_read, False)
    os.set_blocking(err_read, False)

    captured = {out_read: bytearray(), err_read: bytearray()}
    open_fds = {out_read, err_read}
    selector = selectors.DefaultSelector()
    for fd in open_fds:
        selector.register(fd, selectors.EVENT_READ)

    deadline = started + timeout_s
    exit_status: int | None = None
    exit_seen_at: float | None = None
    timed_out = False

    while open_fds:
        now = time.monotonic()
        if now >= deadline:
            timed_out = exit_status is None
            break
        if exit_status is None:
            reaped, status = os.waitpid(pid, os.WNOHANG)
            if reaped == pid:
                exit_status = status
                exit_seen_at = now
        if exit_seen_at is not None and now - exit_seen_at > LINGER_S:
            break
        wait = min(deadline - now, 0.05)
        for key, _ in selector.select(wait):
            chunk = os.read(key.fd, 65536)
            if not chunk:
                selector.unregister(key.fd)
                os.close(key.fd)
                open_fds.discard(key.fd)
                continue
            buffer = captured[key.fd]
            if len(buffer) < MAX_STREAM_BYTES:
                buffer.extend(chunk[: MAX_STREAM_BYTES - len(buffer)])

    # Pipes can hit EOF before the exit is observable, and a snippet may
    # close its own streams and keep computing; keep waiting for the
    # exit until the deadline before calling it a timeout.
    while exit_status is None and time.monotonic() < deadline:
        reaped, status = os.waitpid(pid, os.WNOHANG)
        if reaped == pid:
            exit_status = status
            break
        time.sleep(0.005)
    if exit_status is None:
        timed_out = True
        try:
            os.kill(pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        _, exit_status = os.waitpid(pid, 0)

    wall = time.monotonic() - started

    # Final non-blocking drain of whatever arrived before the close.
    for fd in list(open_fds):
        while True:
            try:
                chunk = os.read(fd, 65536)
            except BlockingIOError:
                break
            if not chunk:
                break
            buffer = captured[fd]
            if len(buffer) < MAX_STREAM_BYTES:
                buffer.extend(chunk[: MAX_STREAM_BYTES - len(buffer)])
        selector.unregister(fd)
        os.close(fd)
    selector.close()

    stdout = captured[out_read].decode("utf-8", errors="replace")
    stderr = captured[err_read].decode("utf-8", errors="replace")

    if timed_out:
        status = STATUS_TIMEOUT
    elif os.waitstatus_to_exitcode(exit_status) == 0:
        status = STATUS_OK
    else:
        status = STATUS_ERROR
        if not stderr:
            stderr = f"[runner] snippet exited with code {os.waitstatus_to_exitcode(exit_status)}"

    return {
        "status": status,
        "stdout": stdout,
        "stderr": stderr,
        "wall_time_s": wall,
    }


def handle_line(line: bytes | str) -> dict:
    try:
        request = parse_request(line)
    except RequestError as exc:
        return _error_reply(str(exc))
    return run_snippet(request["code"], request["timeout_s"], request["allow_network"])


def serve(stdin=None, stdout=None) -> int:
    """Answer one reply line per request line until EOF."""
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    for line in stdin:
        if not line.strip():
            continue
        reply = handle_line(line)
        stdout.write(json.dumps(reply).encode("utf-8") + b"\n")
        stdout.flush()
    return 0


def main() -> None:
    sys.exit(serve())
