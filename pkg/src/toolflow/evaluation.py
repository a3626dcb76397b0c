"""Batch evaluation driver and report generation.

Every question yields exactly one trace; the report aggregates per-domain and
overall accuracy, a used/not-used split over retrieved functions, retrieval
quality, and failure counts. Reports render as a human table or as a
line-per-metric records format that round-trips exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .bench import (
    RobustnessMode,
    apply_robustness_setting,
    control_hit_ratio,
    question_rng,
)
from .errors import ConfigError
from .pipeline import PipelineConfig, Question, Trace, solve_batch
from .retrieval import build_index, hit_at_k, recall_at_k
from .toolset import DOMAINS, Toolset

TABLE_DOMAIN_ORDER = ("math", "physics", "chemistry", "finance", "eecs", "other")


@dataclass
class Partition:
    n: int = 0
    correct: int = 0

    @property
    def accuracy(self) -> float | None:
        return (self.correct / self.n) if self.n else None

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.n, "correct": self.correct, "accuracy": self.accuracy}


@dataclass
class EvalReport:
    run_id: str
    config_snapshot: dict[str, Any]
    per_domain: dict[str, Partition]
    overall: Partition
    wo_math: Partition
    usage_split: dict[str, Partition]
    retrieval: dict[str, float] | None
    failures: dict[str, int]

    def to_flat(self) -> dict[str, Any]:
        """Flatten to dotted metric keys for the records format."""
        flat: dict[str, Any] = {"run_id": self.run_id}
        for key in sorted(self.config_snapshot):
            flat[f"config.{key}"] = self.config_snapshot[key]
        for dom in sorted(self.per_domain):
            part = self.per_domain[dom]
            flat[f"per_domain.{dom}.n"] = part.n
            flat[f"per_domain.{dom}.correct"] = part.correct
            flat[f"per_domain.{dom}.accuracy"] = part.accuracy
        for label, part in (("overall", self.overall), ("wo_math", self.wo_math)):
            flat[f"{label}.n"] = part.n
            flat[f"{label}.correct"] = part.correct
            flat[f"{label}.accuracy"] = part.accuracy
        for label in sorted(self.usage_split):
            part = self.usage_split[label]
            flat[f"usage_split.{label}.n"] = part.n
            flat[f"usage_split.{label}.correct"] = part.correct
            flat[f"usage_split.{label}.accuracy"] = part.accuracy
        if self.retrieval is not None:
            for key in sorted(self.retrieval):
                flat[f"retrieval.{key}"] = self.retrieval[key]
        for verdict in sorted(self.failures):
            flat[f"failures.{verdict}"] = self.failures[verdict]
        return flat


def _partition(traces: Iterable[Trace]) -> Partition:
    part = Partition()
    for trace in traces:
        part.n += 1
        if trace.correct is True:
            part.correct += 1
    return part


def usage_split_report(traces: Sequence[Trace]) -> dict[str, Partition]:
    """Partition traces by whether the program called a retrieved function."""
    return {
        "used": _partition(t for t in traces if t.used_retrieved),
        "not_used": _partition(t for t in traces if not t.used_retrieved),
    }


def _failure_counts(traces: Sequence[Trace]) -> dict[str, int]:
    counts = {v: 0 for v in ("runtime_error", "timeout", "resource_exceeded",
                             "protocol_error", "no_program")}
    for trace in traces:
        if trace.failure == "no_program":
            counts["no_program"] += 1
        elif trace.execution is not None and trace.execution.verdict != "ok":
            counts[trace.execution.verdict] += 1
    return counts


def _retrieval_metrics(
    traces: Sequence[Trace], questions: Sequence[Question], k: int
) -> dict[str, float]:
    by_id = {q.id: q for q in questions}
    recalls: list[float] = []
    hits: list[bool] = []
    for trace in traces:
        gold = set(by_id[trace.question_id].derived_function_ids)
        ranked = [fid for fid, _ in trace.retrieved]
        recalls.append(recall_at_k(ranked, gold, k))
        hits.append(hit_at_k(ranked, gold, k))
    if not traces:
        return {f"recall_at_{k}": 0.0, f"hit_at_{k}": 0.0}
    return {
        f"recall_at_{k}": sum(recalls) / len(recalls),
        f"hit_at_{k}": sum(hits) / len(hits),
    }


def _run_id(config_snapshot: dict[str, Any], question_ids: Sequence[str]) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(config_snapshot, sort_keys=True).encode("utf-8"))
    for qid in question_ids:
        digest.update(qid.encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()[:12]


@dataclass
class EvalSettings:
    """Harness-level knobs on top of the pipeline configuration."""

    mode: RobustnessMode = field(default_factory=RobustnessMode)
    hit_target: float | None = None
    seed: int = 0
    workers: int = 1


def run_eval(
    questions: Sequence[Question],
    toolset: Toolset | None,
    config: PipelineConfig,
    settings: EvalSettings | None = None,
) -> tuple[EvalReport, list[Trace]]:
    """Evaluate all questions and aggregate a report.

    Per-question failures become verdicts; only configuration errors raise.
    Aggregation order is fixed (sorted by question id), so worker count and
    scheduling never change the report.
    """
    settings = settings or EvalSettings()
    questions = sorted(questions, key=lambda q: q.id)

    if toolset is not None and settings.mode.mode == "unrelated":
        toolset = settings.mode.substitute_toolset
        config = _reindexed(config, toolset)

    traces: list[Trace] = []
    if toolset is None:
        traces = solve_batch(questions, None, config, workers=settings.workers)
    elif settings.mode.mode == "weak_related":
        traces = _solve_with_exclusions(questions, toolset, config, settings)
    else:
        cfg = _with_hit_control(questions, toolset, config, settings)
        traces = solve_batch(questions, toolset, cfg, workers=settings.workers)

    per_domain: dict[str, Partition] = {}
    by_id = {q.id: q for q in questions}
    for dom in [d for d in DOMAINS if any(q.domain == d for q in questions)]:
        per_domain[dom] = _partition(
            t for t in traces if by_id[t.question_id].domain == dom
        )
    overall = _partition(traces)
    wo_math = _partition(t for t in traces if by_id[t.question_id].domain != "math")

    config_snapshot = {
        "backend": getattr(config.backend, "name", "unknown"),
        "k": config.k if toolset is not None else 0,
        "rel_tol": config.rel_tol,
        "abs_tol": config.abs_tol,
        "mode": settings.mode.mode,
        "hit_target": settings.hit_target,
        "seed": settings.seed,
        "toolset": toolset.version if toolset is not None else None,
        "wall_time": config.limits.wall_time,
    }
    report = EvalReport(
        run_id=_run_id(config_snapshot, [q.id for q in questions]),
        config_snapshot=config_snapshot,
        per_domain=per_domain,
        overall=overall,
        wo_math=wo_math,
        usage_split=usage_split_report(traces),
        retrieval=(
            _retrieval_metrics(traces, questions, config.k)
            if toolset is not None and config.k > 0
            else None
        ),
        failures=_failure_counts(traces),
    )
    return report, traces


def _reindexed(config: PipelineConfig, toolset: Toolset) -> PipelineConfig:
    from dataclasses import replace

    return replace(config, index=build_index(toolset, config.embedder))


def _solve_with_exclusions(
    questions: Sequence[Question],
    toolset: Toolset,
    config: PipelineConfig,
    settings: EvalSettings,
) -> list[Trace]:
    """weak_related mode: each question excludes its own derived functions."""
    from dataclasses import replace

    traces: list[Trace] = []
    for q in questions:
        effective = apply_robustness_setting(toolset, q, settings.mode)
        cfg = replace(config, excluded_ids=effective.excluded)
        cfg = _with_hit_control([q], toolset, cfg, settings)
        traces.extend(solve_batch([q], toolset, cfg, workers=1))
    return sorted(traces, key=lambda t: t.question_id)


def _with_hit_control(
    questions: Sequence[Question],
    toolset: Toolset,
    config: PipelineConfig,
    settings: EvalSettings,
) -> PipelineConfig:
    if settings.hit_target is None:
        return config
    from dataclasses import replace

    target = settings.hit_target
    seed = settings.seed
    if config.index is None:
        raise ConfigError("hit-ratio control requires a retrieval index")

    def adjust(
        question: Question,
        ranked: list[tuple[str, float]],
        full: list[tuple[str, float]],
    ) -> list[tuple[str, float]]:
        scores = dict(full)
        adjusted = control_hit_ratio(
            [fid for fid, _ in ranked],
            set(question.derived_function_ids),
            target,
            question_rng(seed, question.id),
            pool_ranking=[fid for fid, _ in full],
        )
        return [(fid, scores.get(fid, 0.0)) for fid in adjusted]

    return replace(config, adjust_retrieved=adjust)


# --- rendering ----------------------------------------------------------------

def _fmt_acc(part: Partition) -> str:
    return "n/a" if part.accuracy is None else f"{100 * part.accuracy:.1f}"


def render_report(report: EvalReport, format: str = "table") -> str:
    """Render a report as a human table or as line-per-metric records."""
    if format == "records":
        flat = report.to_flat()
        lines = [f"{key}\t{json.dumps(flat[key], sort_keys=True)}" for key in flat]
        return "\n".join(lines) + "\n"
    if format != "table":
        raise ValueError(f"unknown report format {format!r}")

    cfg = report.config_snapshot
    header = (
        f"run {report.run_id} | backend={cfg.get('backend')} k={cfg.get('k')} "
        f"mode={cfg.get('mode')} rel_tol={cfg.get('rel_tol')} abs_tol={cfg.get('abs_tol')}"
    )
    domains = [d for d in TABLE_DOMAIN_ORDER if d in report.per_domain]
    columns = [d.capitalize() for d in domains] + ["All", "wo. Math"]
    acc_row = [_fmt_acc(report.per_domain[d]) for d in domains]
    acc_row += [_fmt_acc(report.overall), _fmt_acc(report.wo_math)]
    n_row = [str(report.per_domain[d].n) for d in domains]
    n_row += [str(report.overall.n), str(report.wo_math.n)]

    widths = [max(len(c), len(a), len(n)) for c, a, n in zip(columns, acc_row, n_row)]
    def fmt_row(label: str, cells: list[str]) -> str:
        body = "  ".join(cell.rjust(w) for cell, w in zip(cells, widths))
        return f"{label:<10}{body}"

    lines = [header, fmt_row("", columns), fmt_row("accuracy", acc_row), fmt_row("n", n_row)]
    used = report.usage_split["used"]
    not_used = report.usage_split["not_used"]
    lines.append(
        f"usage: used n={used.n} acc={_fmt_acc(used)} | "
        f"not_used n={not_used.n} acc={_fmt_acc(not_used)}"
    )
    if report.retrieval is not None:
        metrics = "  ".join(f"{k}={v:.3f}" for k, v in sorted(report.retrieval.items()))
        lines.append(f"retrieval: {metrics}")
    fails = "  ".join(f"{k}={v}" for k, v in sorted(report.failures.items()))
    lines.append(f"failures: {fails}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> EvalReport:
    """Parse the records format back into an EvalReport (exact round-trip)."""
    flat: dict[str, Any] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("\t")
        flat[key] = json.loads(raw)

    def part(prefix: str) -> Partition:
        return Partition(n=flat[f"{prefix}.n"], correct=flat[f"{prefix}.correct"])

    per_domain = {}
    usage = {}
    config_snapshot = {}
    retrieval: dict[str, float] | None = None
    failures: dict[str, int] = {}
    for key in flat:
        if key.startswith("per_domain.") and key.endswith(".n"):
            dom = key.split(".")[1]
            per_domain[dom] = part(f"per_domain.{dom}")
        elif key.startswith("usage_split.") and key.endswith(".n"):
            label = key.split(".")[1]
            usage[label] = part(f"usage_split.{label}")
        elif key.startswith("config."):
            config_snapshot[key[len("config."):]] = flat[key]
        elif key.startswith("retrieval."):
            retrieval = retrieval or {}
            retrieval[key[len("retrieval."):]] = flat[key]
        elif key.startswith("failures."):
            failures[key[len("failures."):]] = flat[key]
    return EvalReport(
        run_id=flat["run_id"],
        config_snapshot=config_snapshot,
        per_domain=per_domain,
        overall=part("overall"),
        wo_math=part("wo_math"),
        usage_split=usage,
        retrieval=retrieval,
        failures=failures,
    )
