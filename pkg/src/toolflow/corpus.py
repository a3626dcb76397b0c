"""Training-corpus construction: candidate generation, rectification,
toolset accumulation, cross-retrieval, and instruction-dataset emission.

Phase one turns each seed question into a candidate bundle (planning,
functions, solution) and repairs failing solutions with execution-error
feedback. Accepted bundles' functions accumulate into the toolset. Phase two
generates the actual training samples: function-augmented solutions retrieve
only functions derived from *other* questions (cross-retrieval), and
function-free solutions use no functions at all.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import grading
from .errors import AllAttemptsFailed, ParseFailure
from .gateway import (
    GenerationBackend,
    GenerationRequest,
    TemplateStore,
    default_templates,
    generate,
)
from .pipeline import (
    Planning,
    Solution,
    parse_planning,
    parse_solution,
    render_functions_block,
)
from .records import read_records, write_records
from .retrieval import (
    DEFAULT_K,
    EmbeddingBackend,
    Query,
    RetrievalIndex,
    build_index,
    retrieve,
)
from .sandbox import ExecutionLimits, ExecutionResult, Executor, assemble_program
from .toolset import (
    ToolFunction,
    Toolset,
    dedup_functions,
    parse_function_document,
    rename_function,
)


@dataclass(frozen=True)
class SeedQuestion:
    """A corpus seed: question text plus its reference solution and answer."""

    id: str
    domain: str
    text: str
    gold_solution: str
    gold_answer: str

    def to_record(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "domain": self.domain,
            "text": self.text,
            "gold_solution": self.gold_solution,
            "gold_answer": self.gold_answer,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "SeedQuestion":
        return cls(
            id=rec["id"],
            domain=rec.get("domain", "math"),
            text=rec["text"],
            gold_solution=rec["gold_solution"],
            gold_answer=str(rec["gold_answer"]),
        )


@dataclass
class CandidateBundle:
    """Phase-one output for one seed: planning, own functions, own solution."""

    question_id: str
    planning: Planning
    functions: tuple[ToolFunction, ...]
    solution: Solution | None
    answer: str | None = None
    attempts: int = 0
    accepted: bool = False
    failure: str | None = None
    execution: ExecutionResult | None = None

    def to_record(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "planning_raw": self.planning.raw,
            "functions": [fn.to_record() for fn in self.functions],
            "solution_raw": self.solution.raw if self.solution else None,
            "answer": self.answer,
            "attempts": self.attempts,
            "accepted": self.accepted,
            "failure": self.failure,
            "execution": self.execution.to_record() if self.execution else None,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "CandidateBundle":
        functions = tuple(
            parse_function_document(
                f["source"],
                domain=f.get("domain", "math"),
                provenance=f.get("provenance", "generated"),
                derived_from=f.get("derived_from", ()),
                fn_id=f.get("id"),
            )
            for f in rec.get("functions", ())
        )
        solution_raw = rec.get("solution_raw")
        execution = rec.get("execution")
        return cls(
            question_id=rec["question_id"],
            planning=parse_planning(rec.get("planning_raw", "")),
            functions=functions,
            solution=parse_solution(solution_raw) if solution_raw is not None else None,
            answer=rec.get("answer"),
            attempts=rec.get("attempts", 0),
            accepted=rec.get("accepted", False),
            failure=rec.get("failure"),
            execution=ExecutionResult.from_record(execution) if execution else None,
        )


@dataclass(frozen=True)
class Sample:
    """One training quintuple: question, planning, functions, solution, answer."""

    question_id: str
    question_text: str
    planning: Planning
    functions: tuple[ToolFunction, ...]
    solution: Solution
    answer: str
    variant: str  # "function_augmented" | "function_free"

    def __post_init__(self):
        if self.variant not in ("function_augmented", "function_free"):
            raise ValueError(f"unknown sample variant {self.variant!r}")
        if self.variant == "function_free" and self.functions:
            raise ValueError("function_free samples must not carry retrieved functions")

    def to_record(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "question_text": self.question_text,
            "planning_raw": self.planning.raw,
            "function_ids": [fn.id for fn in self.functions],
            "solution_raw": self.solution.raw,
            "answer": self.answer,
            "variant": self.variant,
        }


# --- structured-completion parsing ------------------------------------------

_SECTION_HEADERS = ("PLANNING", "FUNCTIONS", "SOLUTION")
_SECTION_RE = re.compile(r"(?m)^(PLANNING|FUNCTIONS|SOLUTION):[ \t]*$")


def parse_sections(text: str) -> dict[str, str]:
    """Split a structured completion on its PLANNING/FUNCTIONS/SOLUTION headers."""
    sections: dict[str, str] = {}
    matches = list(_SECTION_RE.finditer(text))
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        sections[m.group(1)] = text[m.end():end].strip("\n")
    return sections


def extract_code_block(section: str) -> str:
    """The fenced code inside a section, or the raw section when unfenced."""
    solution = parse_solution(section)
    programs = solution.programs
    if programs:
        return "\n\n".join(p.strip("\n") for p in programs)
    return section


def split_function_sources(code: str) -> list[str]:
    """Split a code block into one source string per top-level function.

    Statements outside function definitions are dropped; generated functions
    carry their imports inside the body.
    """
    tree = ast.parse(code)
    lines = code.splitlines(keepends=True)
    out: list[str] = []
    for node in tree.body:
        if not isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            continue
        start = node.lineno
        if node.decorator_list:
            start = min(start, min(d.lineno for d in node.decorator_list))
        out.append("".join(lines[start - 1 : node.end_lineno]))
    return out


def _parse_candidate_functions(
    section: str, seed: SeedQuestion
) -> tuple[ToolFunction, ...]:
    code = extract_code_block(section)
    try:
        sources = split_function_sources(code)
    except SyntaxError as exc:
        raise ParseFailure(f"functions section does not parse: {exc}") from exc
    functions = []
    for source in sources:
        functions.append(
            parse_function_document(
                source,
                domain=seed.domain,
                provenance="generated",
                derived_from=(seed.id,),
            )
        )
    if not functions:
        raise ParseFailure("completion contains no function definitions")
    return tuple(functions)


# --- phase one: candidates and rectification ---------------------------------

@dataclass
class CorpusConfig:
    max_iters: int = 3
    n_samples: int = 5
    temperature: float = 0.6
    top_p: float = 0.95
    k: int = DEFAULT_K
    rel_tol: float = grading.DEFAULT_REL_TOL
    abs_tol: float = grading.DEFAULT_ABS_TOL
    max_tokens: int = 2048
    limits: ExecutionLimits = field(default_factory=ExecutionLimits)

    @property
    def generation_budget(self) -> int:
        """Hard per-question cap: candidates + rectify + fa + ff."""
        return 1 + self.max_iters + (1 + self.n_samples) * 2


def generate_candidates(
    seed: SeedQuestion,
    backend: GenerationBackend,
    executor: Executor,
    config: CorpusConfig,
    templates: TemplateStore | None = None,
) -> CandidateBundle:
    """Ask the model for planning, functions, and a solution for one seed.

    Parse failures do not raise: the bundle comes back unaccepted with the
    failure reason recorded.
    """
    store = templates or default_templates()
    prompt = store.render(
        "toolset_construct", {"question": seed.text, "solution": seed.gold_solution}
    )
    completion = generate(
        backend,
        GenerationRequest(
            prompt=prompt, temperature=0.0, n=1,
            max_tokens=config.max_tokens, template_id="toolset_construct",
        ),
    )[0]
    sections = parse_sections(completion.text)
    missing = [h for h in _SECTION_HEADERS if h not in sections]
    if missing:
        return CandidateBundle(
            question_id=seed.id,
            planning=parse_planning(sections.get("PLANNING", "")),
            functions=(),
            solution=None,
            failure=f"ParseFailure: missing sections {', '.join(missing)}",
        )
    planning = parse_planning(sections["PLANNING"])
    try:
        functions = _parse_candidate_functions(sections["FUNCTIONS"], seed)
    except Exception as exc:
        return CandidateBundle(
            question_id=seed.id,
            planning=planning,
            functions=(),
            solution=None,
            failure=f"ParseFailure: {exc}",
        )
    solution = parse_solution(sections["SOLUTION"])
    if not solution.programs:
        return CandidateBundle(
            question_id=seed.id,
            planning=planning,
            functions=functions,
            solution=None,
            failure="ParseFailure: solution section has no program",
        )
    execution = executor.execute(assemble_program(solution, functions), config.limits)
    return CandidateBundle(
        question_id=seed.id,
        planning=planning,
        functions=functions,
        solution=solution,
        answer=execution.answer_text if execution.ok else None,
        execution=execution,
    )


def _error_feedback(execution: ExecutionResult) -> tuple[str, str]:
    error_type = execution.error_type or execution.verdict
    error_message = execution.error_message or "(no message)"
    return error_type, error_message


def rectify_loop(
    bundle: CandidateBundle,
    seed: SeedQuestion,
    backend: GenerationBackend,
    executor: Executor,
    config: CorpusConfig,
    templates: TemplateStore | None = None,
) -> CandidateBundle:
    """Repair a failing bundle with execution-error feedback, bounded by max_iters.

    The final bundle is accepted only when execution succeeds and the answer
    grades correct against the seed's gold answer.
    """
    store = templates or default_templates()
    if bundle.solution is None:
        return bundle
    execution = bundle.execution or executor.execute(
        assemble_program(bundle.solution, bundle.functions), config.limits
    )
    functions = bundle.functions
    solution = bundle.solution
    attempts = 0
    while not execution.ok and attempts < config.max_iters:
        error_type, error_message = _error_feedback(execution)
        prompt = store.render(
            "rectify",
            {
                "question": seed.text,
                "functions": "\n\n".join(fn.source.strip("\n") for fn in functions),
                "solution": solution.program_text,
                "error_type": error_type,
                "error_message": error_message,
            },
        )
        completion = generate(
            backend,
            GenerationRequest(
                prompt=prompt, temperature=0.0, n=1,
                max_tokens=config.max_tokens, template_id="rectify",
            ),
        )[0]
        attempts += 1
        sections = parse_sections(completion.text)
        try:
            if "FUNCTIONS" in sections:
                functions = _parse_candidate_functions(sections["FUNCTIONS"], seed)
            if "SOLUTION" in sections:
                fixed = parse_solution(sections["SOLUTION"])
                if fixed.programs:
                    solution = fixed
        except ParseFailure:
            continue  # unusable fix; the attempt still counts
        execution = executor.execute(assemble_program(solution, functions), config.limits)

    answer = execution.answer_text if execution.ok else None
    accepted = bool(
        execution.ok
        and answer is not None
        and grading.grade(answer, seed.gold_answer, config.rel_tol, config.abs_tol)
    )
    return replace(
        bundle,
        functions=functions,
        solution=solution,
        answer=answer,
        attempts=attempts,
        accepted=accepted,
        execution=execution,
        failure=None if accepted else (bundle.failure or _reject_reason(execution)),
    )


def _reject_reason(execution: ExecutionResult) -> str:
    if execution.ok:
        return "wrong answer"
    error_type, error_message = _error_feedback(execution)
    return f"{error_type}: {error_message}"


def accumulate_toolset(
    bundles: Iterable[CandidateBundle], domain: str = "math"
) -> Toolset:
    """Union of accepted bundles' functions, deduplicated, links merged.

    Functions from rejected bundles never enter the toolset. Distinct
    functions that collide on name are renamed with a numeric suffix.
    """
    collected: list[ToolFunction] = []
    for bundle in bundles:
        if bundle.accepted:
            collected.extend(bundle.functions)
    deduped = dedup_functions(collected)
    seen: dict[str, int] = {}
    resolved: list[ToolFunction] = []
    for fn in deduped:
        if fn.name in seen:
            seen[fn.name] += 1
            fn = rename_function(fn, f"{fn.name}_{seen[fn.name]}")
        else:
            seen[fn.name] = 1
        resolved.append(fn)
    resolved.sort(key=lambda fn: fn.id)
    return Toolset.build(domain=domain, functions=resolved)


# --- phase two: sample generation ---------------------------------------------

def cross_retrieve(
    question_text: str,
    planning: Planning,
    index: RetrievalIndex,
    embedder: EmbeddingBackend,
    own_function_ids: Iterable[str],
    k: int = DEFAULT_K,
) -> list[tuple[str, float]]:
    """Retrieve functions for a question with its own derived functions excluded.

    The result is disjoint from the question's own functions by construction.
    """
    query = Query(question_text=question_text, planning_text=planning.text or None)
    return retrieve(index, query, embedder, k=k, excluded=frozenset(own_function_ids))


@dataclass(frozen=True)
class Attempt:
    kind: str  # "greedy" | "sample"
    index: int
    verdict: str
    correct: bool

    def to_record(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "index": self.index,
            "verdict": self.verdict,
            "correct": self.correct,
        }


def _solution_attempts(
    seed: SeedQuestion,
    prompt: str,
    template_id: str,
    functions: Sequence[ToolFunction],
    planning: Planning,
    variant: str,
    backend: GenerationBackend,
    executor: Executor,
    config: CorpusConfig,
) -> tuple[Sample, list[Attempt]]:
    """Greedy attempt first, then nucleus samples; first correct solution wins."""
    attempts: list[Attempt] = []

    def evaluate(kind: str, idx: int, text: str) -> Sample | None:
        solution = parse_solution(text)
        if not solution.programs:
            attempts.append(Attempt(kind, idx, "no_program", False))
            return None
        execution = executor.execute(
            assemble_program(solution, functions), config.limits
        )
        correct = bool(
            execution.ok
            and execution.answer_text is not None
            and grading.grade(
                execution.answer_text, seed.gold_answer, config.rel_tol, config.abs_tol
            )
        )
        attempts.append(Attempt(kind, idx, execution.verdict, correct))
        if not correct:
            return None
        return Sample(
            question_id=seed.id,
            question_text=seed.text,
            planning=planning,
            functions=tuple(functions),
            solution=solution,
            answer=execution.answer_text,
            variant=variant,
        )

    greedy = generate(
        backend,
        GenerationRequest(
            prompt=prompt, temperature=0.0, n=1,
            max_tokens=config.max_tokens, template_id=template_id,
        ),
    )[0]
    sample = evaluate("greedy", 0, greedy.text)
    if sample is not None:
        return sample, attempts

    sampled = generate(
        backend,
        GenerationRequest(
            prompt=prompt,
            temperature=config.temperature,
            top_p=config.top_p,
            n=config.n_samples,
            max_tokens=config.max_tokens,
            template_id=template_id,
        ),
    )
    for i, completion in enumerate(sampled):
        sample = evaluate("sample", i, completion.text)
        if sample is not None:
            return sample, attempts
    raise AllAttemptsFailed(
        f"all {1 + config.n_samples} attempts failed for question {seed.id}",
        attempts=[a.to_record() for a in attempts],
    )


def generate_fa_solution(
    seed: SeedQuestion,
    planning: Planning,
    functions: Sequence[ToolFunction],
    backend: GenerationBackend,
    executor: Executor,
    config: CorpusConfig,
    templates: TemplateStore | None = None,
) -> tuple[Sample, list[Attempt]]:
    """Generate a function-augmented sample over cross-retrieved functions."""
    store = templates or default_templates()
    prompt = store.render(
        "cross_retrieval_solution",
        {"question": seed.text, "functions": render_functions_block(functions)},
    )
    return _solution_attempts(
        seed, prompt, "cross_retrieval_solution", functions, planning,
        "function_augmented", backend, executor, config,
    )


def generate_ff_solution(
    seed: SeedQuestion,
    backend: GenerationBackend,
    executor: Executor,
    config: CorpusConfig,
    templates: TemplateStore | None = None,
) -> tuple[Sample, list[Attempt]]:
    """Generate a function-free sample (no functions retrieved or used)."""
    store = templates or default_templates()
    prompt = store.render("eval_without_tools", {"question": seed.text})
    return _solution_attempts(
        seed, prompt, "eval_without_tools", (), Planning(steps=(), raw=""),
        "function_free", backend, executor, config,
    )


# --- instruction datasets ------------------------------------------------------

def emit_instruction_datasets(
    samples: Sequence[Sample], templates: TemplateStore | None = None
) -> tuple[list[dict[str, str]], list[dict[str, str]]]:
    """Planning and action instruction pairs, one of each per sample."""
    store = templates or default_templates()
    planning_records: list[dict[str, str]] = []
    action_records: list[dict[str, str]] = []
    for sample in samples:
        planning_records.append(
            {
                "input": store.render("planning_gen", {"question": sample.question_text}),
                "output": sample.planning.raw,
            }
        )
        action_records.append(
            {
                "input": store.render(
                    "action_gen",
                    {
                        "question": sample.question_text,
                        "functions": render_functions_block(sample.functions),
                    },
                ),
                "output": sample.solution.raw,
            }
        )
    return planning_records, action_records


# --- pipeline driver -------------------------------------------------------------

@dataclass
class CorpusResult:
    toolset: Toolset
    bundles: list[CandidateBundle]
    samples: list[Sample]
    yield_report: dict[str, Any]


def _load_checkpoint(path: Path) -> dict[str, dict[str, Any]]:
    if not path.exists():
        return {}
    return {rec["question_id"]: rec for rec in read_records(path)}


def build_corpus(
    seeds: Sequence[SeedQuestion],
    backend: GenerationBackend,
    executor: Executor,
    embedder: EmbeddingBackend,
    config: CorpusConfig | None = None,
    templates: TemplateStore | None = None,
    out_dir: str | Path | None = None,
    domain: str = "math",
) -> CorpusResult:
    """Run both corpus phases over the seeds; optionally resume from out_dir.

    With a replay backend and an existing partial checkpoint, the rerun
    produces the same corpus as an uninterrupted run.
    """
    config = config or CorpusConfig()
    store = templates or default_templates()
    out = Path(out_dir) if out_dir else None
    bundle_ckpt = out / "bundles.ckpt.jsonl" if out else None
    generations: dict[str, int] = {}

    existing = _load_checkpoint(bundle_ckpt) if bundle_ckpt else {}
    bundles: list[CandidateBundle] = []
    new_bundle_records: list[dict[str, Any]] = []
    for seed in seeds:
        if seed.id in existing:
            bundles.append(CandidateBundle.from_record(existing[seed.id]))
            generations[seed.id] = existing[seed.id].get("generations", 0)
            continue
        bundle = generate_candidates(seed, backend, executor, config, store)
        used = 1
        if bundle.solution is not None:
            bundle = rectify_loop(bundle, seed, backend, executor, config, store)
            used += bundle.attempts
        generations[seed.id] = used
        bundles.append(bundle)
        rec = bundle.to_record()
        rec["generations"] = used
        new_bundle_records.append(rec)
    if bundle_ckpt:
        merged = list(existing.values()) + new_bundle_records
        merged.sort(key=lambda r: r["question_id"])
        write_records(bundle_ckpt, merged)

    toolset = accumulate_toolset(bundles, domain=domain)
    index = build_index(toolset, embedder)
    bundles_by_id = {b.question_id: b for b in bundles}
    toolset_ids = set(toolset.ids())

    samples: list[Sample] = []
    rejections: list[dict[str, Any]] = []
    for seed in seeds:
        bundle = bundles_by_id[seed.id]
        own_ids = {fn.id for fn in bundle.functions}
        retrieved = cross_retrieve(
            seed.text, bundle.planning, index, embedder, own_ids, k=config.k
        )
        assert not (set(fid for fid, _ in retrieved) & own_ids)
        by_id = toolset.by_id()
        functions = [by_id[fid] for fid, _ in retrieved]
        try:
            sample, attempts = generate_fa_solution(
                seed, bundle.planning, functions, backend, executor, config, store
            )
            samples.append(sample)
            generations[seed.id] += _gen_count(attempts, config)
        except AllAttemptsFailed as exc:
            rejections.append(
                {"question_id": seed.id, "stage": "fa", "attempts": exc.attempts}
            )
            generations[seed.id] += 1 + config.n_samples
        try:
            sample, attempts = generate_ff_solution(seed, backend, executor, config, store)
            samples.append(sample)
            generations[seed.id] += _gen_count(attempts, config)
        except AllAttemptsFailed as exc:
            rejections.append(
                {"question_id": seed.id, "stage": "ff", "attempts": exc.attempts}
            )
            generations[seed.id] += 1 + config.n_samples

    for seed in seeds:
        assert generations[seed.id] <= config.generation_budget, (
            f"generation budget exceeded for {seed.id}"
        )

    fa = [s for s in samples if s.variant == "function_augmented"]
    ff = [s for s in samples if s.variant == "function_free"]
    yield_report = {
        "seeds": len(seeds),
        "bundles_accepted": sum(1 for b in bundles if b.accepted),
        "bundles_rejected": sum(1 for b in bundles if not b.accepted),
        "toolset_functions": len(toolset),
        "fa_samples": len(fa),
        "ff_samples": len(ff),
        "rejections": rejections,
        "generation_budget": config.generation_budget,
        "generations_per_question": {qid: generations[qid] for qid in sorted(generations)},
    }

    if out:
        from .toolset import write_toolset

        write_toolset(toolset, out / "toolset.jsonl")
        write_records(out / "samples.jsonl", (s.to_record() for s in samples))
        planning_ds, action_ds = emit_instruction_datasets(samples, store)
        write_records(out / "planning_dataset.jsonl", planning_ds)
        write_records(out / "action_dataset.jsonl", action_ds)
        write_records(out / "yield_report.jsonl", [yield_report])

    return CorpusResult(
        toolset=toolset, bundles=bundles, samples=samples, yield_report=yield_report
    )


def _gen_count(attempts: list[Attempt], config: CorpusConfig) -> int:
    """Generations consumed: one greedy call, plus one n-sample call if used."""
    if any(a.kind == "sample" for a in attempts):
        return 1 + config.n_samples
    return 1
