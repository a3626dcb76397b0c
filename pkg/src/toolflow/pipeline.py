"""The four-stage solve pipeline: plan, retrieve, act, execute.

`solve` orchestrates the stages for one question and always returns a full
Trace; per-question failures become verdicts on the trace, never exceptions.
Only configuration problems (missing index, unreachable backend) abort a run.
"""

from __future__ import annotations

import io
import re
import time
import tokenize
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from . import grading
from .errors import ConfigError, NoProgramFound
from .gateway import (
    EMPTY_TOOLSET_TEXT,
    GenerationBackend,
    GenerationRequest,
    TemplateStore,
    default_templates,
    generate,
)
from .retrieval import (
    DEFAULT_K,
    EmbeddingBackend,
    Query,
    RetrievalIndex,
    check_fresh,
    retrieve,
)
from .sandbox import ExecutionLimits, ExecutionResult, Executor, assemble_program
from .toolset import ToolFunction, Toolset

QUESTION_SOURCES = ("theoremqa", "scibench", "fixture")


@dataclass(frozen=True)
class Question:
    id: str
    domain: str
    text: str
    gold_answer: str
    derived_function_ids: tuple[str, ...] = ()
    source: str = "fixture"

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"question {self.id} has empty text")

    def to_record(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "domain": self.domain,
            "text": self.text,
            "gold_answer": self.gold_answer,
            "derived_function_ids": list(self.derived_function_ids),
            "source": self.source,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "Question":
        return cls(
            id=rec["id"],
            domain=rec["domain"],
            text=rec["text"],
            gold_answer=str(rec["gold_answer"]),
            derived_function_ids=tuple(rec.get("derived_function_ids", ())),
            source=rec.get("source", "fixture"),
        )


_STEP_RE = re.compile(r"^\s*(?:\((\d+)\)|(\d+)[.)]|[Ss]tep\s+(\d+)\s*:)\s*(.+)$")


@dataclass(frozen=True)
class Planning:
    """High-level step outline; the raw completion is always retained."""

    steps: tuple[str, ...]
    raw: str

    @property
    def text(self) -> str:
        return "\n".join(self.steps) if self.steps else self.raw


def parse_planning(raw: str) -> Planning:
    """Split a planning completion into numbered steps.

    Accepts "(1) ...", "1. ...", "1) ..." and "Step 1:" prefixes. Text with no
    recognizable numbering becomes a single step; empty text yields no steps.
    """
    steps: list[str] = []
    for line in raw.splitlines():
        m = _STEP_RE.match(line)
        if m:
            steps.append(m.group(4).strip())
    if not steps and raw.strip():
        steps = [raw.strip()]
    return Planning(steps=tuple(steps), raw=raw)


@dataclass(frozen=True)
class Segment:
    kind: str  # "rationale" | "program"
    text: str

    @property
    def is_program(self) -> bool:
        return self.kind == "program"


@dataclass(frozen=True)
class Solution:
    """Rationale text interleaved with fenced program segments."""

    segments: tuple[Segment, ...]
    raw: str

    @property
    def programs(self) -> list[str]:
        return [seg.text for seg in self.segments if seg.is_program]

    @property
    def program_text(self) -> str:
        return "\n".join(p.strip("\n") for p in self.programs)


_FENCE_RE = re.compile(r"^```[a-zA-Z0-9_+-]*[ \t]*$")


def parse_solution(raw: str) -> Solution:
    """Parse fenced code blocks into program segments, surrounding text into rationale."""
    segments: list[Segment] = []
    buffer: list[str] = []
    in_fence = False
    for line in raw.splitlines(keepends=True):
        if _FENCE_RE.match(line.rstrip("\n")):
            text = "".join(buffer)
            if in_fence:
                segments.append(Segment("program", text))
            elif text.strip():
                segments.append(Segment("rationale", text))
            buffer = []
            in_fence = not in_fence
            continue
        buffer.append(line)
    tail = "".join(buffer)
    if tail.strip():
        # An unterminated fence still counts as program text.
        segments.append(Segment("program" if in_fence else "rationale", tail))
    return Solution(segments=tuple(segments), raw=raw)


@dataclass
class Trace:
    """Full per-question record of one pipeline run."""

    question_id: str
    planning: Planning
    retrieved: list[tuple[str, float]]
    solution: Solution | None
    execution: ExecutionResult | None
    predicted_answer: str | None
    correct: bool | None
    used_retrieved: bool
    timings: dict[str, float]
    failure: str | None = None  # e.g. "no_program" when no code block was found

    def to_record(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "planning": {"steps": list(self.planning.steps), "raw": self.planning.raw},
            "retrieved": [[fid, score] for fid, score in self.retrieved],
            "solution_raw": self.solution.raw if self.solution else None,
            "execution": self.execution.to_record() if self.execution else None,
            "predicted_answer": self.predicted_answer,
            "correct": self.correct,
            "used_retrieved": self.used_retrieved,
            "timings": self.timings,
            "failure": self.failure,
        }


@dataclass
class PipelineConfig:
    """Everything `solve` needs besides the question and toolset."""

    backend: GenerationBackend
    executor: Executor
    embedder: EmbeddingBackend
    index: RetrievalIndex | None = None
    templates: TemplateStore | None = None
    k: int = DEFAULT_K
    limits: ExecutionLimits = field(default_factory=ExecutionLimits)
    rel_tol: float = grading.DEFAULT_REL_TOL
    abs_tol: float = grading.DEFAULT_ABS_TOL
    max_tokens: int = 2048
    planning_temperature: float = 0.0  # greedy planning; configurable
    excluded_ids: frozenset[str] = frozenset()
    # adjust_retrieved(question, top_k, full_ranking) -> adjusted top_k
    adjust_retrieved: Callable[
        [Question, list[tuple[str, float]], list[tuple[str, float]]],
        list[tuple[str, float]],
    ] | None = None

    def template_store(self) -> TemplateStore:
        return self.templates or default_templates()


def plan(question: Question, backend: GenerationBackend,
         templates: TemplateStore | None = None,
         temperature: float = 0.0, max_tokens: int = 2048) -> Planning:
    """Generate the high-level planning for a question (greedy by default)."""
    store = templates or default_templates()
    prompt = store.render("planning_gen", {"question": question.text})
    request = GenerationRequest(
        prompt=prompt,
        temperature=temperature,
        n=1,
        max_tokens=max_tokens,
        template_id="planning_gen",
    )
    completion = generate(backend, request)[0]
    return parse_planning(completion.text)


def render_functions_block(functions: Sequence[ToolFunction]) -> str:
    """Function sources, in retrieval order, as one prompt block."""
    if not functions:
        return EMPTY_TOOLSET_TEXT
    return "\n\n".join(fn.source.strip("\n") for fn in functions)


def act(
    question: Question,
    functions: Sequence[ToolFunction],
    backend: GenerationBackend,
    templates: TemplateStore | None = None,
    max_tokens: int = 2048,
    template_id: str | None = None,
) -> Solution:
    """Generate the low-level solution, optionally grounded in retrieved functions.

    Raises NoProgramFound when the completion contains no code block; callers
    record that on the trace rather than failing the batch.
    """
    store = templates or default_templates()
    if template_id is None:
        template_id = "action_gen" if functions else "eval_without_tools"
    slots = {"question": question.text}
    if "functions" in store.slots(template_id):
        slots["functions"] = render_functions_block(functions)
    prompt = store.render(template_id, slots)
    request = GenerationRequest(
        prompt=prompt, temperature=0.0, n=1, max_tokens=max_tokens, template_id=template_id
    )
    completion = generate(backend, request)[0]
    solution = parse_solution(completion.text)
    if not any(seg.is_program for seg in solution.segments):
        raise NoProgramFound(f"completion for question {question.id} has no code block")
    return solution


def _call_positions(code: str, names: frozenset[str]) -> bool:
    """True when any name occurs in call position, string literals excluded."""
    try:
        tokens = list(tokenize.generate_tokens(io.StringIO(code).readline))
    except (tokenize.TokenError, IndentationError, SyntaxError):
        return _call_positions_fallback(code, names)
    significant = [
        t for t in tokens
        if t.type not in (tokenize.NL, tokenize.NEWLINE, tokenize.INDENT,
                          tokenize.DEDENT, tokenize.COMMENT, tokenize.ENCODING)
    ]
    for i, tok in enumerate(significant):
        if tok.type != tokenize.NAME or tok.string not in names:
            continue
        nxt = significant[i + 1] if i + 1 < len(significant) else None
        prev = significant[i - 1] if i > 0 else None
        if nxt is None or not (nxt.type == tokenize.OP and nxt.string == "("):
            continue
        if prev is not None and prev.type == tokenize.NAME and prev.string == "def":
            continue
        if prev is not None and prev.type == tokenize.OP and prev.string == ".":
            continue
        return True
    return False


def _call_positions_fallback(code: str, names: frozenset[str]) -> bool:
    # Tokenizer rejected the program (malformed model output): fall back to a
    # regex over comment-stripped lines.
    stripped = re.sub(r"(?m)#.*$", "", code)
    for name in names:
        if re.search(rf"(?<!def )(?<!\.)\b{re.escape(name)}\s*\(", stripped):
            return True
    return False


def detect_function_usage(program: str, retrieved: Sequence[ToolFunction]) -> bool:
    """Whether the program calls any retrieved function by name.

    Computed from program text, not model self-report: a retrieved name
    followed by "(", not a definition, not an attribute, and not inside a
    string literal.
    """
    if not retrieved or not program.strip():
        return False
    names = frozenset(fn.name for fn in retrieved)
    return _call_positions(program, names)


def solve(question: Question, toolset: Toolset | None, config: PipelineConfig) -> Trace:
    """Run the full pipeline for one question and return its Trace.

    Stage order is plan, retrieve, act, execute, grade; timings record the
    order. Failures in generation, parsing, or execution become trace
    verdicts.
    """
    timings: dict[str, float] = {}
    store = config.template_store()

    t0 = time.monotonic()
    planning = plan(
        question, config.backend, store,
        temperature=config.planning_temperature, max_tokens=config.max_tokens,
    )
    timings["plan"] = time.monotonic() - t0

    t0 = time.monotonic()
    retrieved: list[tuple[str, float]] = []
    functions: list[ToolFunction] = []
    if toolset is not None and config.k > 0:
        if config.index is None:
            raise ConfigError("toolset attached but no retrieval index configured")
        check_fresh(config.index, toolset)
        query = Query(question_text=question.text, planning_text=planning.text or None)
        if config.adjust_retrieved is not None:
            full = retrieve(
                config.index, query, config.embedder,
                k=len(config.index), excluded=config.excluded_ids,
            )
            retrieved = config.adjust_retrieved(question, full[: config.k], full)
        else:
            retrieved = retrieve(
                config.index, query, config.embedder,
                k=config.k, excluded=config.excluded_ids,
            )
        by_id = toolset.by_id()
        functions = [by_id[fid] for fid, _ in retrieved]
    timings["retrieve"] = time.monotonic() - t0

    t0 = time.monotonic()
    solution: Solution | None = None
    failure: str | None = None
    try:
        solution = act(
            question, functions, config.backend, store, max_tokens=config.max_tokens
        )
    except NoProgramFound:
        failure = "no_program"
    timings["act"] = time.monotonic() - t0

    t0 = time.monotonic()
    execution: ExecutionResult | None = None
    predicted: str | None = None
    correct: bool | None = None
    used = False
    if solution is not None:
        program = assemble_program(solution, functions)
        used = detect_function_usage(solution.program_text, functions)
        execution = config.executor.execute(program, config.limits)
        if execution.ok and execution.answer_text is not None:
            predicted = execution.answer_text
            correct = grading.grade(
                predicted, question.gold_answer, config.rel_tol, config.abs_tol
            )
    timings["execute"] = time.monotonic() - t0

    return Trace(
        question_id=question.id,
        planning=planning,
        retrieved=retrieved,
        solution=solution,
        execution=execution,
        predicted_answer=predicted,
        correct=correct,
        used_retrieved=used,
        timings=timings,
        failure=failure,
    )


def solve_batch(
    questions: Sequence[Question],
    toolset: Toolset | None,
    config: PipelineConfig,
    workers: int = 1,
) -> list[Trace]:
    """Solve questions with up to `workers` concurrent pipelines.

    Results come back sorted by question id regardless of completion order,
    so worker count never changes the output.
    """
    if workers <= 1 or len(questions) <= 1:
        traces = [solve(q, toolset, config) for q in questions]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(lambda q: solve(q, toolset, config), questions))
    return sorted(traces, key=lambda t: t.question_id)
