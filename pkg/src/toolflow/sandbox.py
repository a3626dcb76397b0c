"""Program assembly and isolated execution of guest programs.

The supervisor spawns a conforming runner process per execution in a fresh
working directory, enforces wall-clock and memory limits from the outside,
and decodes the runner's final-line JSON protocol record into an
ExecutionResult. All guest failure modes become verdicts, never exceptions.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

try:
    import resource as _resource
except ImportError:  # non-POSIX hosts: memory limit becomes advisory
    _resource = None

from .errors import NoProgramSegments, RunnerUnavailable
from .records import read_records, write_records
from .toolset import ToolFunction

TRUNCATION_MARKER = "\n...[output truncated]"

VERDICTS = ("ok", "runtime_error", "timeout", "resource_exceeded", "protocol_error")

ENV_RUNNER = "TOOLFLOW_RUNNER"


@dataclass(frozen=True)
class ExecutionLimits:
    wall_time: float = 30.0
    memory: int = 1024 * 1024 * 1024
    output_cap: int = 64 * 1024
    network_forbidden: bool = True

    def __post_init__(self):
        if self.wall_time <= 0:
            raise ValueError("wall_time must be positive")
        if self.memory <= 0:
            raise ValueError("memory must be positive")
        if self.output_cap <= 0:
            raise ValueError("output_cap must be positive")


@dataclass(frozen=True)
class ExecutionResult:
    verdict: str
    stdout: str = ""
    answer_text: str | None = None
    error_type: str | None = None
    error_message: str | None = None
    wall_time_used: float = 0.0

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if self.verdict == "ok" and self.error_type:
            raise ValueError("ok results carry no error_type")
        if self.verdict == "runtime_error" and not self.error_type:
            raise ValueError("runtime_error results must carry an error_type")

    @property
    def ok(self) -> bool:
        return self.verdict == "ok"

    def to_record(self) -> dict[str, Any]:
        return {
            "verdict": self.verdict,
            "stdout": self.stdout,
            "answer_text": self.answer_text,
            "error_type": self.error_type,
            "error_message": self.error_message,
            "wall_time_used": self.wall_time_used,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "ExecutionResult":
        return cls(
            verdict=rec["verdict"],
            stdout=rec.get("stdout", ""),
            answer_text=rec.get("answer_text"),
            error_type=rec.get("error_type"),
            error_message=rec.get("error_message"),
            wall_time_used=rec.get("wall_time_used", 0.0),
        )


def assemble_program(solution, functions: Sequence[ToolFunction]) -> str:
    """Prefix the solution's program segments with the retrieved function sources.

    Blocks appear in order (functions first, in retrieval order), separated by
    one blank line; nothing else is injected.
    """
    programs = [seg.text for seg in solution.segments if seg.is_program]
    if not programs:
        raise NoProgramSegments("solution has no program segments")
    blocks = [fn.source.strip("\n") for fn in functions]
    blocks += [p.strip("\n") for p in programs]
    return "\n\n".join(blocks) + "\n"


class Executor(Protocol):
    def execute(self, program: str, limits: ExecutionLimits) -> ExecutionResult: ...


def _truncate(text: str, cap: int) -> str:
    if len(text.encode("utf-8")) <= cap:
        return text
    clipped = text.encode("utf-8")[:cap].decode("utf-8", errors="ignore")
    return clipped + TRUNCATION_MARKER


def _decode_protocol(raw_stdout: str) -> tuple[dict[str, Any] | None, str]:
    """Split runner output into (final protocol record, preceding program stdout)."""
    if not raw_stdout:
        return None, ""
    lines = raw_stdout.splitlines(keepends=True)
    while lines and lines[-1].strip() == "":
        lines.pop()
    if not lines:
        return None, ""
    last = lines[-1].strip()
    try:
        record = json.loads(last)
    except json.JSONDecodeError:
        return None, raw_stdout
    if not isinstance(record, dict) or "status" not in record:
        return None, raw_stdout
    return record, "".join(lines[:-1])


def resolve_runner(runner_cmd: Sequence[str] | None = None) -> list[str]:
    """Resolve the guest runner command: explicit > $TOOLFLOW_RUNNER > PATH lookup."""
    if runner_cmd:
        cmd = list(runner_cmd)
        # children run in their own workdir: a relative script path would break
        if cmd and cmd[-1].endswith(".py"):
            cmd[-1] = str(Path(cmd[-1]).resolve())
        return cmd
    env = os.environ.get(ENV_RUNNER)
    if env:
        path = Path(env).resolve()
        if path.suffix == ".py":
            return [sys.executable, str(path)]
        return [str(path)]
    found = shutil.which("toolflow-runner")
    if found:
        return [found]
    raise RunnerUnavailable(
        f"no guest runner configured; set {ENV_RUNNER} or install toolflow-runner"
    )


_children_semaphore = threading.BoundedSemaphore(32)


def set_max_concurrent_children(limit: int) -> None:
    """Resize the global cap on concurrently running guest processes."""
    global _children_semaphore
    if limit < 1:
        raise ValueError("limit must be positive")
    _children_semaphore = threading.BoundedSemaphore(limit)


class SubprocessExecutor:
    """Runs guest programs through an external runner process.

    Each execution owns a fresh temporary working directory (deleted after),
    a scrubbed environment, and an externally enforced wall clock; the child
    process group is killed on timeout. A global semaphore caps concurrent
    children.
    """

    def __init__(self, runner_cmd: Sequence[str] | None = None):
        self.runner_cmd = resolve_runner(runner_cmd)

    def _child_env(self, workdir: str, limits: ExecutionLimits) -> dict[str, str]:
        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "HOME": workdir,
            "TMPDIR": workdir,
            "PYTHONIOENCODING": "utf-8",
            "LANG": os.environ.get("LANG", "C.UTF-8"),
        }
        if limits.network_forbidden:
            # Best-effort scrub; the runner's socket guard is the second layer.
            env["no_proxy"] = "*"
        return env

    def execute(self, program: str, limits: ExecutionLimits) -> ExecutionResult:
        workdir = tempfile.mkdtemp(prefix="toolflow-exec-")
        started = time.monotonic()
        try:
            program_path = Path(workdir) / "program.py"
            program_path.write_text(program, encoding="utf-8")
            cmd = list(self.runner_cmd) + [str(program_path)]
            if not limits.network_forbidden:
                cmd.append("--no-socket-guard")

            def set_memory_limit():
                if _resource is not None:
                    try:
                        _resource.setrlimit(
                            _resource.RLIMIT_AS, (limits.memory, limits.memory)
                        )
                    except (ValueError, OSError):
                        pass

            with _children_semaphore:
                proc = subprocess.Popen(
                    cmd,
                    cwd=workdir,
                    env=self._child_env(workdir, limits),
                    stdout=subprocess.PIPE,
                    stderr=subprocess.DEVNULL,
                    start_new_session=True,
                    preexec_fn=set_memory_limit,
                )
                try:
                    raw, _ = proc.communicate(timeout=limits.wall_time)
                except subprocess.TimeoutExpired:
                    self._kill_group(proc)
                    try:
                        raw, _ = proc.communicate(timeout=1.0)
                    except subprocess.TimeoutExpired:
                        raw = b""
                    elapsed = time.monotonic() - started
                    stdout = _truncate(raw.decode("utf-8", errors="replace"), limits.output_cap)
                    return ExecutionResult(
                        verdict="timeout",
                        stdout=stdout,
                        error_message=f"wall time limit of {limits.wall_time}s exceeded",
                        wall_time_used=elapsed,
                    )
            elapsed = time.monotonic() - started
            text = raw.decode("utf-8", errors="replace")
            record, program_stdout = _decode_protocol(text)
            stdout = _truncate(program_stdout, limits.output_cap)
            if record is None:
                if proc.returncode and proc.returncode < 0:
                    sig = -proc.returncode
                    return ExecutionResult(
                        verdict="resource_exceeded",
                        stdout=stdout,
                        error_message=f"guest terminated by signal {sig}",
                        wall_time_used=elapsed,
                    )
                return ExecutionResult(
                    verdict="protocol_error",
                    stdout=stdout,
                    error_message=(
                        f"runner produced no protocol record (exit code {proc.returncode})"
                    ),
                    wall_time_used=elapsed,
                )
            if record.get("status") == "ok":
                return ExecutionResult(
                    verdict="ok",
                    stdout=stdout,
                    answer_text=record.get("answer"),
                    wall_time_used=elapsed,
                )
            return ExecutionResult(
                verdict="runtime_error",
                stdout=stdout,
                error_type=record.get("error_type") or "UnknownError",
                error_message=record.get("error_message") or "(no message)",
                wall_time_used=elapsed,
            )
        finally:
            shutil.rmtree(workdir, ignore_errors=True)

    @staticmethod
    def _kill_group(proc: subprocess.Popen) -> None:
        try:
            os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
        except (ProcessLookupError, PermissionError, OSError):
            try:
                proc.kill()
            except ProcessLookupError:
                pass


# --- test doubles ------------------------------------------------------------

# Minimal directive interpreter used as a child process in supervisor-logic
# tests, so process control (timeouts, truncation, isolation) can be exercised
# without a guest runtime. Directives, one per line:
#   echo TEXT, sleep SECONDS, spin, bigout NBYTES, fail TYPE MESSAGE, answer TEXT
_ECHO_RUNTIME = r"""
import json, sys, time
path = sys.argv[1]
answer = None
try:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split(" ", 1)
            op = parts[0]
            arg = parts[1] if len(parts) > 1 else ""
            if op == "echo":
                print(arg)
                answer = arg
            elif op == "sleep":
                time.sleep(float(arg))
            elif op == "spin":
                while True:
                    pass
            elif op == "bigout":
                sys.stdout.write("x" * int(arg))
                sys.stdout.write("\n")
            elif op == "answer":
                answer = arg
            elif op == "fail":
                etype, _, msg = arg.partition(" ")
                print(json.dumps({"status": "error", "answer": None,
                                  "error_type": etype, "error_message": msg}))
                sys.exit(0)
    print(json.dumps({"status": "ok", "answer": answer,
                      "error_type": None, "error_message": None}))
except Exception as exc:
    print(json.dumps({"status": "error", "answer": None,
                      "error_type": type(exc).__name__, "error_message": str(exc)}))
"""


def echo_runner_cmd() -> list[str]:
    """Command for the supervisor-internal echo runtime (tests only)."""
    return [sys.executable, "-c", _ECHO_RUNTIME]


def program_hash(program: str) -> str:
    return hashlib.sha256(program.encode("utf-8")).hexdigest()


class RecordedExecutor:
    """Replays golden ExecutionResults keyed by program hash.

    The deterministic stand-in for pipeline tests: no guest runtime needed,
    byte-identical results on every run.
    """

    def __init__(self, records: Iterable[dict[str, Any]] = ()):
        self._results: dict[str, ExecutionResult] = {}
        for rec in records:
            self._results[rec["program_sha256"]] = ExecutionResult.from_record(rec)

    @classmethod
    def from_file(cls, path: str | Path) -> "RecordedExecutor":
        return cls(read_records(path))

    def add(self, program: str, result: ExecutionResult) -> None:
        self._results[program_hash(program)] = result

    def __len__(self) -> int:
        return len(self._results)

    def execute(self, program: str, limits: ExecutionLimits) -> ExecutionResult:
        key = program_hash(program)
        result = self._results.get(key)
        if result is None:
            return ExecutionResult(
                verdict="protocol_error",
                error_message=f"no recorded execution for program {key[:12]}",
            )
        return result


class RecordingExecutor:
    """Wraps a real executor and captures golden records for later replay."""

    def __init__(self, inner: Executor):
        self.inner = inner
        self.records: list[dict[str, Any]] = []

    def execute(self, program: str, limits: ExecutionLimits) -> ExecutionResult:
        result = self.inner.execute(program, limits)
        rec = {"program_sha256": program_hash(program)}
        rec.update(result.to_record())
        # Golden records must not embed timing noise.
        rec["wall_time_used"] = 0.0
        self.records.append(rec)
        return result

    def save(self, path: str | Path) -> int:
        return write_records(path, self.records)
