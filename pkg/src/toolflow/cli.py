"""toolflow command-line interface.

One subcommand group per subsystem: toolset, index, retrieve, gateway, exec,
grade, run, corpus, bench, eval, config. Exit code is nonzero only for
configuration errors; per-question failures are data, not exits.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import __version__, config as config_mod
from .errors import ToolflowError
from .gateway import (
    GenerationRequest,
    LiveBackend,
    RecordingBackend,
    ReplayBackend,
    default_templates,
)
from .grading import grade as grade_answers, normalize_answer
from .pipeline import PipelineConfig, Question
from .records import read_records, write_records
from .retrieval import HashedTfEmbedder, Query, build_index, load_index, retrieve, save_index
from .sandbox import ExecutionLimits, SubprocessExecutor
from .toolset import Toolset, StatsReport, load_toolset, stats_rows, write_toolset


def _fail(message: str) -> None:
    raise click.ClickException(message)


def _load_questions(path: str) -> list[Question]:
    return [Question.from_record(rec) for rec in read_records(path)]


def _embedder(cfg: config_mod.Config) -> HashedTfEmbedder:
    if cfg.retrieval_backend != "hashed-tf":
        _fail(f"unknown retrieval backend {cfg.retrieval_backend!r}")
    return HashedTfEmbedder(dimension=cfg.retrieval_dimension)


def _backend(cfg: config_mod.Config, kind: str | None = None):
    kind = kind or cfg.backend_kind
    if kind == "replay":
        if not cfg.replay_store:
            _fail("replay backend needs a store (set replay.store or --replay-store)")
        return ReplayBackend.from_file(cfg.replay_store)
    if kind == "live":
        import os

        return LiveBackend(
            base_url=os.environ.get(cfg.backend_base_url_env),
            api_key=os.environ.get(cfg.backend_api_key_env),
            model=os.environ.get(cfg.backend_model_env),
            inflight_cap=cfg.parallelism_inflight_cap,
        )
    _fail(f"unknown backend kind {kind!r}")


def _executor(cfg: config_mod.Config) -> SubprocessExecutor:
    runner = None
    if cfg.sandbox_runner:
        path = Path(cfg.sandbox_runner)
        runner = [sys.executable, str(path)] if path.suffix == ".py" else [cfg.sandbox_runner]
    try:
        return SubprocessExecutor(runner_cmd=runner)
    except ToolflowError as exc:
        _fail(str(exc))


def _limits(cfg: config_mod.Config) -> ExecutionLimits:
    return ExecutionLimits(
        wall_time=cfg.sandbox_wall_time,
        memory=cfg.sandbox_memory,
        output_cap=cfg.sandbox_output_cap,
    )


class _Context:
    def __init__(self, cfg: config_mod.Config):
        self.cfg = cfg


def _print_version(ctx, param, value):
    if not value or ctx.resilient_parsing:
        return
    click.echo(f"toolflow {__version__} (templates {default_templates().store_hash()})")
    ctx.exit(0)


@click.group(invoke_without_command=True)
@click.option("--config", "config_file", type=click.Path(exists=True), default=None,
              help="config file with key = value lines")
@click.option("--set", "flag_sets", multiple=True, metavar="KEY=VALUE",
              help="override one config key")
@click.option("--show-config", is_flag=True, help="print the resolved config and exit")
@click.option("--version", is_flag=True, callback=_print_version, expose_value=False,
              is_eager=True, help="print version and template-store hash")
@click.pass_context
def main(ctx, config_file, flag_sets, show_config):
    """Tool-augmented scientific reasoning over function toolsets."""
    try:
        file_overrides = (
            config_mod.parse_config_file(config_file) if config_file else None
        )
        flag_overrides = config_mod.parse_flag_overrides(list(flag_sets))
        cfg = config_mod.resolve_config(file_overrides, flag_overrides)
    except ToolflowError as exc:
        raise click.ClickException(str(exc)) from exc
    if show_config:
        click.echo(config_mod.render_config(cfg), nl=False)
        ctx.exit(0)
    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())
        ctx.exit(0)
    ctx.obj = _Context(cfg)


@main.group("config")
def config_group():
    """Inspect configuration."""


@config_group.command("show")
@click.pass_obj
def config_show(obj):
    """Print the resolved configuration."""
    click.echo(config_mod.render_config(obj.cfg), nl=False)


# --- toolset -----------------------------------------------------------------

@main.group("toolset")
def toolset_group():
    """Validate and report on toolsets."""


@toolset_group.command("validate")
@click.argument("path", type=click.Path(exists=True))
@click.option("--domain", default="other")
def toolset_validate(path, domain):
    """Parse and validate a toolset; nonzero exit on any violation."""
    try:
        ts = load_toolset(path, domain=domain)
    except (ToolflowError, ValueError) as exc:
        _fail(f"invalid toolset: {exc}")
    click.echo(f"ok: {len(ts)} functions, version {ts.version}")


@toolset_group.command("stats")
@click.argument("toolset_path", type=click.Path(exists=True))
@click.option("--questions", "questions_path", type=click.Path(exists=True), required=True)
@click.option("--domain", default="other")
@click.option("--format", "fmt", type=click.Choice(["table", "records"]), default="table")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="directory for records and figures")
def toolset_stats_cmd(toolset_path, questions_path, domain, fmt, out_dir):
    """Benchmark-style statistics for a toolset and its questions."""
    from .records import dumps_record

    ts = load_toolset(toolset_path, domain=domain)
    questions = _load_questions(questions_path)
    try:
        rows = stats_rows(ts, questions)
    except ToolflowError as exc:
        _fail(str(exc))
    if fmt == "records":
        for row in rows:
            click.echo(dumps_record(row.to_record()))
    else:
        click.echo(_stats_table(rows))
    if out_dir:
        out = Path(out_dir)
        write_records(out / "stats.jsonl", (r.to_record() for r in rows))
        from .figures import render_stats_figures

        for row in rows:
            render_stats_figures(row, out)
        click.echo(f"wrote records and figures to {out}")


def _stats_table(rows: list[StatsReport]) -> str:
    header = f"{'':<12}{'#Question':>10}{'#Func':>8}{'#Pos/#Neg':>12}{'Avg FPQ':>9}"
    lines = [header]
    for row in rows:
        fpq = "n/a" if row.avg_fpq is None else f"{row.avg_fpq:.2f}"
        label = row.label.capitalize() if row.label != "all" else "All"
        lines.append(
            f"{label:<12}{row.n_questions:>10}{row.n_functions:>8}"
            f"{f'{row.n_positive}/{row.n_negative}':>12}{fpq:>9}"
        )
    return "\n".join(lines)


# --- index / retrieve ----------------------------------------------------------

@main.group("index")
def index_group():
    """Build and persist retrieval indexes."""


@index_group.command("build")
@click.argument("toolset_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--domain", default="other")
@click.pass_obj
def index_build(obj, toolset_path, out, domain):
    """Embed a toolset into a similarity index file."""
    ts = load_toolset(toolset_path, domain=domain)
    index = build_index(ts, _embedder(obj.cfg))
    save_index(index, out)
    click.echo(f"indexed {len(index)} functions -> {out}")


@main.command("retrieve")
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--query", "query_path", type=click.Path(), default="-",
              help="query text file, or - for stdin")
@click.option("--k", default=None, type=int)
@click.option("--exclude", multiple=True, help="function id to exclude (repeatable)")
@click.pass_obj
def retrieve_cmd(obj, index_path, query_path, k, exclude):
    """Top-k functions for a query against a persisted index."""
    text = (
        sys.stdin.read() if query_path == "-" else Path(query_path).read_text("utf-8")
    )
    index = load_index(index_path)
    k = k if k is not None else obj.cfg.retrieval_k
    results = retrieve(
        index, Query(question_text=text.strip()), _embedder(obj.cfg),
        k=k, excluded=set(exclude),
    )
    for fid, score in results:
        click.echo(f"{score:.6f}\t{fid}")


# --- gateway --------------------------------------------------------------------

@main.group("gateway")
def gateway_group():
    """Render prompts and record live completions."""


def _slot_dict(slot_pairs) -> dict[str, str]:
    slots = {}
    for pair in slot_pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            _fail(f"--slot {pair!r}: expected name=value")
        slots[key.strip()] = value
    return slots


@gateway_group.command("render")
@click.argument("template_id")
@click.option("--slot", "slot_pairs", multiple=True, metavar="NAME=VALUE")
def gateway_render(template_id, slot_pairs):
    """Render a template with slot values and print the prompt."""
    try:
        click.echo(default_templates().render(template_id, _slot_dict(slot_pairs)), nl=False)
    except ToolflowError as exc:
        _fail(str(exc))


@gateway_group.command("record")
@click.argument("template_id")
@click.option("--slot", "slot_pairs", multiple=True, metavar="NAME=VALUE")
@click.option("--store", required=True, type=click.Path())
@click.option("--n", default=1, type=int)
@click.option("--temperature", default=0.0, type=float)
@click.pass_obj
def gateway_record(obj, template_id, slot_pairs, store, n, temperature):
    """Generate against the live backend and capture into a replay store."""
    prompt = default_templates().render(template_id, _slot_dict(slot_pairs))
    backend = RecordingBackend(_backend(obj.cfg, "live"), store)
    request = GenerationRequest(
        prompt=prompt, temperature=temperature, n=n, template_id=template_id
    )
    completions = backend.generate(request)
    click.echo(f"recorded {len(completions)} completions to {store}")


# --- exec / grade ----------------------------------------------------------------

@main.command("exec")
@click.argument("program_file", type=click.Path(exists=True))
@click.option("--wall", default=None, type=float)
@click.option("--mem", default=None, type=int)
@click.pass_obj
def exec_cmd(obj, program_file, wall, mem):
    """Execute a program file in the sandbox and print the result record."""
    cfg = obj.cfg
    limits = ExecutionLimits(
        wall_time=wall if wall is not None else cfg.sandbox_wall_time,
        memory=mem if mem is not None else cfg.sandbox_memory,
        output_cap=cfg.sandbox_output_cap,
    )
    executor = _executor(cfg)
    result = executor.execute(Path(program_file).read_text("utf-8"), limits)
    click.echo(json.dumps(result.to_record(), sort_keys=True))


@main.command("grade")
@click.option("--pred", required=True)
@click.option("--gold", required=True)
@click.option("--rel", default=None, type=float)
@click.option("--abs", "abs_", default=None, type=float)
@click.pass_obj
def grade_cmd(obj, pred, gold, rel, abs_):
    """Grade one predicted answer against gold."""
    cfg = obj.cfg
    rel = rel if rel is not None else cfg.grading_rel_tol
    abs_ = abs_ if abs_ is not None else cfg.grading_abs_tol
    verdict = grade_answers(pred, gold, rel, abs_)
    p, g = normalize_answer(pred), normalize_answer(gold)
    click.echo(
        json.dumps(
            {
                "correct": verdict,
                "pred": {"kind": p.kind, "value": p.value},
                "gold": {"kind": g.kind, "value": g.value},
                "rel_tol": rel,
                "abs_tol": abs_,
            },
            sort_keys=True,
        )
    )


# --- run / eval ------------------------------------------------------------------

def _pipeline_config(obj, toolset: Toolset | None, backend_kind: str | None,
                     replay_store: str | None, k: int | None) -> PipelineConfig:
    cfg = obj.cfg
    if replay_store:
        cfg.replay_store = replay_store
    embedder = _embedder(cfg)
    index = build_index(toolset, embedder) if toolset is not None else None
    return PipelineConfig(
        backend=_backend(cfg, backend_kind),
        executor=_executor(cfg),
        embedder=embedder,
        index=index,
        k=k if k is not None else cfg.retrieval_k,
        limits=_limits(cfg),
        rel_tol=cfg.grading_rel_tol,
        abs_tol=cfg.grading_abs_tol,
    )


@main.command("run")
@click.option("--questions", "questions_path", required=True, type=click.Path(exists=True))
@click.option("--toolset", "toolset_path", type=click.Path(exists=True), default=None)
@click.option("--no-toolset", is_flag=True)
@click.option("--k", default=None, type=int)
@click.option("--backend", "backend_kind", type=click.Choice(["live", "replay"]), default=None)
@click.option("--replay-store", type=click.Path(exists=True), default=None)
@click.option("--workers", default=None, type=int)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="trace stream output file")
@click.pass_obj
def run_cmd(obj, questions_path, toolset_path, no_toolset, k, backend_kind,
            replay_store, workers, out_path):
    """Run the solve pipeline over a question file and emit traces."""
    from .pipeline import solve_batch

    questions = _load_questions(questions_path)
    toolset = None
    if not no_toolset:
        if not toolset_path:
            _fail("provide --toolset or pass --no-toolset")
        toolset = load_toolset(toolset_path)
    config = _pipeline_config(obj, toolset, backend_kind, replay_store, k)
    workers = workers if workers is not None else obj.cfg.parallelism_workers
    traces = solve_batch(questions, toolset, config, workers=workers)
    correct = sum(1 for t in traces if t.correct is True)
    if out_path:
        write_records(out_path, (t.to_record() for t in traces))
    click.echo(f"{correct}/{len(traces)} correct")


@main.group("eval")
def eval_group():
    """Batch evaluation with reports."""


@eval_group.command("run")
@click.option("--questions", "questions_path", required=True, type=click.Path(exists=True))
@click.option("--toolset", "toolset_path", type=click.Path(exists=True), default=None)
@click.option("--no-toolset", is_flag=True)
@click.option("--k", default=None, type=int)
@click.option("--backend", "backend_kind", type=click.Choice(["live", "replay"]), default=None)
@click.option("--replay-store", type=click.Path(exists=True), default=None)
@click.option("--mode", type=click.Choice(["normal", "weak_related", "unrelated"]),
              default="normal")
@click.option("--substitute-toolset", type=click.Path(exists=True), default=None)
@click.option("--hit-target", default=None, type=float)
@click.option("--seed", default=None, type=int)
@click.option("--workers", default=None, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
def eval_run(obj, questions_path, toolset_path, no_toolset, k, backend_kind,
             replay_store, mode, substitute_toolset, hit_target, seed, workers, out_dir):
    """Evaluate questions and write report.table, report.records, traces.jsonl."""
    from .bench import RobustnessMode
    from .evaluation import EvalSettings, render_report, run_eval

    questions = _load_questions(questions_path)
    toolset = None
    if not no_toolset:
        if not toolset_path:
            _fail("provide --toolset or pass --no-toolset")
        toolset = load_toolset(toolset_path)
    substitute = load_toolset(substitute_toolset) if substitute_toolset else None
    try:
        robustness = RobustnessMode(mode=mode, substitute_toolset=substitute)
    except ValueError as exc:
        _fail(str(exc))
    config = _pipeline_config(obj, toolset, backend_kind, replay_store, k)
    settings = EvalSettings(
        mode=robustness,
        hit_target=hit_target,
        seed=seed if seed is not None else obj.cfg.seed,
        workers=workers if workers is not None else obj.cfg.parallelism_workers,
    )
    report, traces = run_eval(questions, toolset, config, settings)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.table").write_text(render_report(report, "table"), encoding="utf-8")
    (out / "report.records").write_text(render_report(report, "records"), encoding="utf-8")
    write_records(out / "traces.jsonl", (t.to_record() for t in traces))
    click.echo(render_report(report, "table"), nl=False)
    click.echo(f"wrote {out}/report.table, report.records, traces.jsonl")


# --- corpus ------------------------------------------------------------------------

@main.group("corpus")
def corpus_group():
    """Training-corpus construction."""


@corpus_group.command("build")
@click.option("--seeds", "seeds_path", required=True, type=click.Path(exists=True))
@click.option("--backend", "backend_kind", type=click.Choice(["live", "replay"]), default=None)
@click.option("--replay-store", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--domain", default="math")
@click.pass_obj
def corpus_build(obj, seeds_path, backend_kind, replay_store, out_dir, domain):
    """Run both corpus phases over a seed file; resumable via checkpoints."""
    from .corpus import CorpusConfig, SeedQuestion, build_corpus

    cfg = obj.cfg
    if replay_store:
        cfg.replay_store = replay_store
    seeds = [SeedQuestion.from_record(rec) for rec in read_records(seeds_path)]
    corpus_cfg = CorpusConfig(
        max_iters=cfg.corpus_max_iters,
        n_samples=cfg.corpus_n_samples,
        temperature=cfg.corpus_temperature,
        top_p=cfg.corpus_top_p,
        k=cfg.retrieval_k,
        rel_tol=cfg.grading_rel_tol,
        abs_tol=cfg.grading_abs_tol,
        limits=_limits(cfg),
    )
    result = build_corpus(
        seeds,
        backend=_backend(cfg, backend_kind),
        executor=_executor(cfg),
        embedder=_embedder(cfg),
        config=corpus_cfg,
        out_dir=out_dir,
        domain=domain,
    )
    r = result.yield_report
    click.echo(
        f"bundles: {r['bundles_accepted']} accepted / {r['bundles_rejected']} rejected; "
        f"toolset: {r['toolset_functions']} functions; "
        f"samples: {r['fa_samples']} fa + {r['ff_samples']} ff -> {out_dir}"
    )


# --- bench ---------------------------------------------------------------------------

@main.group("bench")
def bench_group():
    """Benchmark toolset assembly."""


@bench_group.command("negatives")
@click.option("--positives", "positives_path", required=True, type=click.Path(exists=True))
@click.option("--backend", "backend_kind", type=click.Choice(["live", "replay"]), default=None)
@click.option("--replay-store", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
def bench_negatives(obj, positives_path, backend_kind, replay_store, out_path):
    """Generate up to two negative functions per positive."""
    from .bench import generate_negatives

    cfg = obj.cfg
    if replay_store:
        cfg.replay_store = replay_store
    backend = _backend(cfg, backend_kind)
    positives = load_toolset(positives_path)
    negatives = []
    for fn in positives:
        negatives.extend(generate_negatives(fn, backend))
    write_records(out_path, (fn.to_record() for fn in negatives))
    click.echo(f"{len(negatives)} negatives for {len(positives)} positives -> {out_path}")


@bench_group.command("assemble")
@click.option("--positives", "positives_path", required=True, type=click.Path(exists=True))
@click.option("--negatives", "negatives_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--domain", default="other")
def bench_assemble(positives_path, negatives_path, out_path, domain):
    """Merge positives and negatives into a benchmark toolset."""
    from .bench import assemble_benchmark_toolset

    positives = load_toolset(positives_path)
    negatives = load_toolset(negatives_path, default_provenance="negative")
    toolset = assemble_benchmark_toolset(
        list(positives), list(negatives), domain=domain
    )
    write_toolset(toolset, out_path)
    click.echo(f"assembled {len(toolset)} functions -> {out_path}")


@bench_group.command("robustness")
@click.option("--mode", type=click.Choice(["normal", "weak_related", "unrelated"]),
              required=True)
@click.option("--questions", "questions_path", required=True, type=click.Path(exists=True))
@click.option("--toolset", "toolset_path", required=True, type=click.Path(exists=True))
@click.option("--substitute-toolset", type=click.Path(exists=True), default=None)
def bench_robustness(mode, questions_path, toolset_path, substitute_toolset):
    """Show the effective retrieval setting per question under a mode."""
    from .bench import RobustnessMode, apply_robustness_setting

    toolset = load_toolset(toolset_path)
    substitute = load_toolset(substitute_toolset) if substitute_toolset else None
    try:
        robustness = RobustnessMode(mode=mode, substitute_toolset=substitute)
    except ValueError as exc:
        _fail(str(exc))
    for q in _load_questions(questions_path):
        try:
            eff = apply_robustness_setting(toolset, q, robustness)
        except ToolflowError as exc:
            _fail(str(exc))
        click.echo(
            json.dumps(
                {
                    "question_id": q.id,
                    "toolset": eff.toolset.version,
                    "excluded": sorted(eff.excluded),
                },
                sort_keys=True,
            )
        )


@bench_group.command("hitctl")
@click.option("--target", required=True, type=float)
@click.option("--seed", default=None, type=int)
@click.option("--retrieved", "retrieved_path", required=True, type=click.Path(exists=True),
              help="records with question_id, retrieved, positives, pool")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
def bench_hitctl(obj, target, seed, retrieved_path, out_path):
    """Apply hit-ratio control to recorded retrieval lists."""
    from .bench import control_hit_ratio, question_rng

    seed = seed if seed is not None else obj.cfg.seed
    adjusted = []
    for rec in read_records(retrieved_path):
        out_ids = control_hit_ratio(
            rec["retrieved"],
            set(rec["positives"]),
            target,
            question_rng(seed, rec["question_id"]),
            pool_ranking=rec.get("pool"),
        )
        adjusted.append({"question_id": rec["question_id"], "retrieved": out_ids})
    write_records(out_path, adjusted)
    click.echo(f"adjusted {len(adjusted)} lists -> {out_path}")


if __name__ == "__main__":
    main()
