#!/usr/bin/env python3
"""In-guest harness for sandboxed program execution.

Runs one Python program in a fresh module namespace, passes the program's own
prints through to stdout, and emits a single-line JSON protocol record as the
final line of output:

    {"status": "ok"|"error", "answer": ..., "error_type": ..., "error_message": ...}

status "ok" carries the last non-empty printed line as the answer; an uncaught
exception yields status "error" with the exception class name and a message
compressed to the last guest frame. The process exits 0 in all handled cases;
resource enforcement belongs to the supervisor, not this script.

Standard library only, by design: the guest environment owes nothing to the
host package.
"""

import argparse
import json
import sys
import traceback


class _AnswerTrackingStdout:
    """Write-through stdout wrapper remembering the last non-empty line."""

    def __init__(self, target):
        self._target = target
        self._partial = ""
        self.last_nonempty = None

    def write(self, text):
        written = self._target.write(text)
        combined = self._partial + text
        lines = combined.split("\n")
        self._partial = lines[-1]
        for line in lines[:-1]:
            if line.strip():
                self.last_nonempty = line
        return written

    def flush(self):
        self._target.flush()

    def finish(self):
        """Account for a trailing unterminated line; returns whether one existed."""
        had_partial = bool(self._partial)
        if self._partial.strip():
            self.last_nonempty = self._partial
        self._partial = ""
        return had_partial

    def __getattr__(self, name):
        return getattr(self._target, name)


def _install_socket_guard():
    import socket

    def _blocked(*args, **kwargs):
        raise OSError("socket creation is disabled inside the sandbox")

    class _GuardedSocket(socket.socket):
        def __init__(self, *args, **kwargs):
            _blocked()

    socket.socket = _GuardedSocket
    socket.create_connection = _blocked
    socket.socketpair = _blocked


def _compressed_error(exc):
    """Exception class name plus message and the last guest frame."""
    error_type = type(exc).__name__
    message = str(exc).strip()
    frames = traceback.extract_tb(exc.__traceback__)
    guest_frames = [f for f in frames if f.filename == "<program>"] or list(frames)
    if guest_frames:
        last = guest_frames[-1]
        location = f"line {last.lineno} in {last.name}"
        message = f"{message} ({location})" if message else location
    if not message:
        message = error_type
    return error_type, message


def run_guest(program_path, socket_guard=True):
    """Execute the program and print the protocol record. Returns exit code 0."""
    try:
        with open(program_path, "r", encoding="utf-8") as fh:
            source = fh.read()
    except OSError as exc:
        record = {
            "status": "error",
            "answer": None,
            "error_type": type(exc).__name__,
            "error_message": str(exc),
        }
        sys.stdout.write(json.dumps(record) + "\n")
        return 0

    if socket_guard:
        _install_socket_guard()

    tracker = _AnswerTrackingStdout(sys.stdout)
    sys.stdout = tracker
    status = "ok"
    answer = None
    error_type = None
    error_message = None
    try:
        code = compile(source, "<program>", "exec")
        namespace = {"__name__": "__main__", "__builtins__": __builtins__}
        exec(code, namespace)
    except SystemExit as exc:
        if exc.code not in (None, 0):
            status = "error"
            error_type = "SystemExit"
            error_message = f"program exited with code {exc.code}"
    except BaseException as exc:  # top-level catch is the whole point here
        status = "error"
        error_type, error_message = _compressed_error(exc)
    finally:
        sys.stdout = tracker._target
        had_partial = tracker.finish()
        tracker.flush()

    if status == "ok":
        answer = tracker.last_nonempty

    # The record must own the final line: terminate any unfinished program line.
    if had_partial:
        sys.stdout.write("\n")
    record = {
        "status": status,
        "answer": answer,
        "error_type": error_type,
        "error_message": error_message,
    }
    sys.stdout.write(json.dumps(record) + "\n")
    sys.stdout.flush()
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(description="sandbox guest runner")
    parser.add_argument("program", help="path to the program to execute")
    parser.add_argument(
        "--no-socket-guard",
        action="store_true",
        help="allow socket creation inside the guest program",
    )
    args = parser.parse_args(argv)
    return run_guest(args.program, socket_guard=not args.no_socket_guard)


if __name__ == "__main__":
    sys.exit(main())
