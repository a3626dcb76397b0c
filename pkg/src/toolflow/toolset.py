"""Function toolsets: parsing, validation, storage, and statistics.

A tool function is a single well-documented Python function. Toolsets are
immutable registries of tool functions, loadable either from a directory of
one-function-per-file sources or from a JSONL record stream (the canonical
interchange format).
"""

from __future__ import annotations

import ast
import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import (
    DanglingLink,
    DuplicateName,
    MissingDoc,
    MultipleFunctions,
    NoFunctionFound,
    SourceSyntaxError,
)
from .records import read_records, write_records

DOMAINS = ("math", "physics", "chemistry", "finance", "eecs", "other")
PROVENANCES = ("positive", "negative", "generated", "rewritten")

# "rewritten" functions are human-repaired positives; they count toward the
# positive side of benchmark statistics.
POSITIVE_CLASS = frozenset({"positive", "rewritten"})


def _short_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:10]


def function_id(domain: str, name: str, source: str) -> str:
    """Stable id: domain + name + short source hash.

    Stays fixed across re-loads and disambiguates same-named variants.
    """
    return f"{domain}/{name}#{_short_hash(source)}"


@dataclass(frozen=True)
class ToolFunction:
    """One documented, callable Python function.

    `source` holds the full verbatim source text; serialization round-trips it
    byte-exactly. `extra` carries unknown record fields, preserved on write.
    """

    id: str
    name: str
    source: str
    doc: str
    params: tuple[str, ...]
    domain: str = "other"
    provenance: str = "generated"
    derived_from: tuple[str, ...] = ()
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.name or not self.name.isidentifier():
            raise ValueError(f"function name must be a non-empty identifier, got {self.name!r}")
        if not self.doc.strip():
            raise MissingDoc(f"function {self.name!r} has no documentation")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "negative" and self.derived_from:
            raise ValueError(
                f"negative function {self.name!r} must not carry derivation links"
            )

    @property
    def signature(self) -> str:
        """Canonical one-line signature used as part of the retrieval key."""
        return f"def {self.name}({', '.join(self.params)}):"

    def to_record(self) -> dict[str, Any]:
        record = dict(self.extra)
        record.update(
            id=self.id,
            domain=self.domain,
            provenance=self.provenance,
            derived_from=list(self.derived_from),
            source=self.source,
        )
        return record


def _extract_params(node: ast.FunctionDef | ast.AsyncFunctionDef) -> tuple[str, ...]:
    a = node.args
    names = [p.arg for p in a.posonlyargs] + [p.arg for p in a.args]
    if a.vararg:
        names.append(a.vararg.arg)
    names += [p.arg for p in a.kwonlyargs]
    if a.kwarg:
        names.append(a.kwarg.arg)
    return tuple(names)


def parse_function_document(
    source: str,
    domain: str = "other",
    provenance: str = "generated",
    derived_from: Sequence[str] = (),
    fn_id: str | None = None,
    extra: dict[str, Any] | None = None,
) -> ToolFunction:
    """Parse one function source into a ToolFunction.

    The source must contain exactly one top-level function definition with a
    non-empty documentation block. The source text is stored verbatim.
    """
    try:
        tree = ast.parse(source)
    except SyntaxError as exc:
        raise SourceSyntaxError(f"unparseable function source: {exc}") from exc
    defs = [n for n in tree.body if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef))]
    if not defs:
        raise NoFunctionFound("source contains no top-level function definition")
    if len(defs) > 1:
        names = ", ".join(d.name for d in defs)
        raise MultipleFunctions(f"source defines more than one function: {names}")
    node = defs[0]
    doc = ast.get_docstring(node)
    if not doc or not doc.strip():
        raise MissingDoc(f"function {node.name!r} has no documentation block")
    return ToolFunction(
        id=fn_id if fn_id is not None else function_id(domain, node.name, source),
        name=node.name,
        source=source,
        doc=doc,
        params=_extract_params(node),
        domain=domain,
        provenance=provenance,
        derived_from=tuple(derived_from),
        extra=dict(extra or {}),
    )


def normalized_source(fn: ToolFunction) -> str:
    """Comment-free, whitespace-normalized form used for duplicate detection.

    Two functions are duplicates when their normalized signatures and bodies
    (docstring included; doc differences are semantic) are identical.
    """
    try:
        tree = ast.parse(fn.source)
        node = next(
            n for n in tree.body if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef))
        )
    except (SyntaxError, StopIteration):
        return " ".join(fn.source.split())
    return ast.dump(node, annotate_fields=False)


def dedup_functions(functions: Sequence[ToolFunction]) -> list[ToolFunction]:
    """Collapse normalized-identical functions to the first occurrence.

    Order is otherwise preserved; derivation links of dropped duplicates are
    merged into the retained copy. Idempotent.
    """
    retained: list[ToolFunction] = []
    by_key: dict[str, int] = {}
    for fn in functions:
        key = normalized_source(fn)
        if key in by_key:
            idx = by_key[key]
            kept = retained[idx]
            merged = kept.derived_from + tuple(
                q for q in fn.derived_from if q not in kept.derived_from
            )
            if merged != kept.derived_from:
                retained[idx] = replace(kept, derived_from=merged)
        else:
            by_key[key] = len(retained)
            retained.append(fn)
    return retained


def rename_function(fn: ToolFunction, new_name: str) -> ToolFunction:
    """Rewrite the function's definition line to a new name.

    Used to resolve name collisions when merging toolsets; the original name
    is recorded under `renamed_from` and the id is recomputed from the new
    source.
    """
    if not new_name.isidentifier():
        raise ValueError(f"invalid function name {new_name!r}")
    tree = ast.parse(fn.source)
    node = next(
        n for n in tree.body if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef))
    )
    lines = fn.source.splitlines(keepends=True)
    i = node.lineno - 1
    pattern = re.compile(rf"(\bdef\s+){re.escape(fn.name)}\b")
    new_line, count = pattern.subn(rf"\g<1>{new_name}", lines[i], count=1)
    if count != 1:
        raise ValueError(f"could not locate definition of {fn.name!r} to rename")
    lines[i] = new_line
    source = "".join(lines)
    return parse_function_document(
        source,
        domain=fn.domain,
        provenance=fn.provenance,
        derived_from=fn.derived_from,
        extra={**fn.extra, "renamed_from": fn.name},
    )


@dataclass(frozen=True)
class Toolset:
    """Immutable registry of tool functions for one domain tag."""

    domain: str
    functions: tuple[ToolFunction, ...]
    version: str

    @classmethod
    def build(cls, domain: str, functions: Iterable[ToolFunction]) -> "Toolset":
        fns = tuple(functions)
        seen: dict[str, str] = {}
        for fn in fns:
            if fn.name in seen:
                raise DuplicateName(
                    f"functions {seen[fn.name]} and {fn.id} share the name {fn.name!r}"
                )
            seen[fn.name] = fn.id
        digest = hashlib.sha256()
        for fn in fns:
            digest.update(fn.id.encode("utf-8"))
            digest.update(b"\x00")
            digest.update(fn.source.encode("utf-8"))
            digest.update(b"\x01")
        return cls(domain=domain, functions=fns, version=digest.hexdigest()[:16])

    def __len__(self) -> int:
        return len(self.functions)

    def __iter__(self):
        return iter(self.functions)

    def get(self, fn_id: str) -> ToolFunction:
        fn = self.by_id().get(fn_id)
        if fn is None:
            raise KeyError(fn_id)
        return fn

    def by_id(self) -> dict[str, ToolFunction]:
        return {fn.id: fn for fn in self.functions}

    def ids(self) -> list[str]:
        return [fn.id for fn in self.functions]


def load_toolset(
    path: str | Path,
    domain: str = "other",
    default_provenance: str = "positive",
) -> Toolset:
    """Load a toolset from a directory of .py files or a JSONL record stream.

    Directory loads parse each file as one function and use `domain` and
    `default_provenance` for every entry; record streams carry their own
    metadata. Functions are ordered by id.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    functions: list[ToolFunction] = []
    if path.is_dir():
        seen_names: dict[str, Path] = {}
        for file in sorted(path.glob("*.py")):
            source = file.read_text(encoding="utf-8")
            try:
                fn = parse_function_document(
                    source, domain=domain, provenance=default_provenance
                )
            except Exception as exc:
                raise type(exc)(f"{file}: {exc}") from exc
            if fn.name in seen_names:
                raise DuplicateName(
                    f"{file} and {seen_names[fn.name]} both define {fn.name!r}"
                )
            seen_names[fn.name] = file
            functions.append(fn)
    else:
        for record in read_records(path):
            known = {"id", "domain", "provenance", "derived_from", "source"}
            extra = {k: v for k, v in record.items() if k not in known}
            rec_domain = record.get("domain", domain)
            try:
                fn = parse_function_document(
                    record["source"],
                    domain=rec_domain,
                    provenance=record.get("provenance", default_provenance),
                    derived_from=record.get("derived_from", ()),
                    fn_id=record.get("id"),
                    extra=extra,
                )
            except Exception as exc:
                raise type(exc)(f"{path} (id={record.get('id')}): {exc}") from exc
            functions.append(fn)
        names = Counter(fn.name for fn in functions)
        dupes = [n for n, c in names.items() if c > 1]
        if dupes:
            raise DuplicateName(f"{path}: duplicate function names: {', '.join(sorted(dupes))}")
    functions.sort(key=lambda fn: fn.id)
    return Toolset.build(domain=domain, functions=functions)


def write_toolset(toolset: Toolset, path: str | Path) -> int:
    return write_records(path, (fn.to_record() for fn in toolset.functions))


@dataclass
class StatsReport:
    """Counts and histograms over a toolset and its linked questions.

    `avg_fpq` is computed strictly from derivation links: the mean number of
    positive-class functions linked per question. The histogram keys are
    counts; values are how many questions (or functions) have that count.
    """

    n_questions: int
    n_functions: int
    n_positive: int
    n_negative: int
    avg_fpq: float | None
    fpq_histogram: dict[int, int]
    occurrence_histogram: dict[int, int]
    label: str = "all"

    @classmethod
    def from_counts(
        cls,
        n_questions: int,
        n_positive: int,
        n_negative: int,
        avg_fpq: float | None = None,
        label: str = "all",
    ) -> "StatsReport":
        """Build a report row from supplied count metadata.

        The function count follows the identity #functions = #pos + #neg.
        """
        return cls(
            n_questions=n_questions,
            n_functions=n_positive + n_negative,
            n_positive=n_positive,
            n_negative=n_negative,
            avg_fpq=avg_fpq,
            fpq_histogram={},
            occurrence_histogram={},
            label=label,
        )

    def to_record(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "n_questions": self.n_questions,
            "n_functions": self.n_functions,
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
            "avg_fpq": self.avg_fpq,
            "fpq_histogram": {str(k): v for k, v in sorted(self.fpq_histogram.items())},
            "occurrence_histogram": {
                str(k): v for k, v in sorted(self.occurrence_histogram.items())
            },
        }


def toolset_stats(toolset: Toolset, questions: Sequence, label: str = "all") -> StatsReport:
    """Compute benchmark statistics for a toolset against linked questions.

    Questions must carry `derived_function_ids`; a link to an unknown id
    raises DanglingLink.
    """
    by_id = toolset.by_id()
    fpq_counts: list[int] = []
    occurrences: Counter[str] = Counter()
    for q in questions:
        links = list(getattr(q, "derived_function_ids"))
        positive_links = 0
        for fid in links:
            fn = by_id.get(fid)
            if fn is None:
                raise DanglingLink(f"question {q.id} links unknown function {fid}")
            occurrences[fid] += 1
            if fn.provenance in POSITIVE_CLASS:
                positive_links += 1
        fpq_counts.append(positive_links)
    n_questions = len(fpq_counts)
    total_links = sum(fpq_counts)
    occurrence_hist = Counter(occurrences.get(fn.id, 0) for fn in toolset.functions)
    return StatsReport(
        n_questions=n_questions,
        n_functions=len(toolset),
        n_positive=sum(1 for fn in toolset if fn.provenance in POSITIVE_CLASS),
        n_negative=sum(1 for fn in toolset if fn.provenance == "negative"),
        avg_fpq=(total_links / n_questions) if n_questions else None,
        fpq_histogram=dict(Counter(fpq_counts)),
        occurrence_histogram=dict(occurrence_hist),
        label=label,
    )


class _QuestionView:
    def __init__(self, qid: str, domain: str, links: Sequence[str]):
        self.id = qid
        self.domain = domain
        self.derived_function_ids = list(links)


def stats_rows(toolset: Toolset, questions: Sequence) -> list[StatsReport]:
    """Per-domain stats rows plus an aggregate row, benchmark-table style.

    Links are validated against the full toolset; per-domain rows count only
    the links that land inside the domain's own functions.
    """
    all_row = toolset_stats(toolset, questions, label="all")
    rows: list[StatsReport] = []
    for dom in [d for d in DOMAINS if any(q.domain == d for q in questions)]:
        dom_fns = [fn for fn in toolset if fn.domain == dom]
        dom_ids = {fn.id for fn in dom_fns}
        dom_questions = [
            _QuestionView(q.id, q.domain, [f for f in q.derived_function_ids if f in dom_ids])
            for q in questions
            if q.domain == dom
        ]
        sub = Toolset.build(domain=dom, functions=dom_fns)
        rows.append(toolset_stats(sub, dom_questions, label=dom))
    rows.append(all_row)
    return rows
