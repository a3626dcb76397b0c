from __future__ import annotations

import sys
from pathlib import Path

import pytest

from toolflow.gateway import ReplayBackend
from toolflow.pipeline import Question
from toolflow.records import read_records
from toolflow.retrieval import HashedTfEmbedder
from toolflow.sandbox import RecordedExecutor
from toolflow.toolset import Toolset, load_toolset

FIXTURES = Path(__file__).resolve().parent / "fixtures"
REPO = Path(__file__).resolve().parents[1]
RUNNER_SCRIPT = REPO / "runner" / "toolflow_runner.py"


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance.py" not in str(report.nodeid):
        return
    name = report.nodeid.split("::", 1)[1]
    status = "PASS" if report.passed else "FAIL"
    print(f"\n[ACCEPTANCE] {status}: {name}")


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def runner_cmd() -> list[str]:
    """Command for the conforming guest runner installed in this repo."""
    assert RUNNER_SCRIPT.exists(), "guest runner not found"
    return [sys.executable, str(RUNNER_SCRIPT)]


@pytest.fixture(scope="session")
def bench_toolset() -> Toolset:
    return load_toolset(FIXTURES / "toolset.jsonl")


@pytest.fixture(scope="session")
def substitute_toolset() -> Toolset:
    return load_toolset(FIXTURES / "substitute_toolset.jsonl")


@pytest.fixture(scope="session")
def bench_questions() -> list[Question]:
    return [Question.from_record(r) for r in read_records(FIXTURES / "questions.jsonl")]


@pytest.fixture(scope="session")
def replay_backend() -> ReplayBackend:
    return ReplayBackend.from_file(FIXTURES / "replay_store.jsonl")


@pytest.fixture(scope="session")
def recorded_executor() -> RecordedExecutor:
    return RecordedExecutor.from_file(FIXTURES / "execution_records.jsonl")


@pytest.fixture(scope="session")
def embedder() -> HashedTfEmbedder:
    return HashedTfEmbedder()
