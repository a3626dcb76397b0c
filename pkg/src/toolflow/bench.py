"""Benchmark assembly: hard-negative generation, provenance-tagged toolset
merging, robustness transforms, hit-ratio control, and difficulty filtering.

Negative functions are similar-but-distinct distractors that remove retrieval
shortcuts; robustness modes and hit-ratio control stress agents under sub-par
or artificially steered retrieval.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import (
    InsufficientPool,
    MissingDerivationLinks,
    WrongOutcomeCount,
)
from .gateway import (
    GenerationBackend,
    GenerationRequest,
    TemplateStore,
    default_templates,
    generate,
)
from .corpus import extract_code_block, split_function_sources
from .toolset import (
    ToolFunction,
    Toolset,
    dedup_functions,
    normalized_source,
    parse_function_document,
    rename_function,
)

# 4 models x 6 solutions each, the difficulty-screen jury size.
OVERDIFFICULT_OUTCOME_COUNT = 24

ROBUSTNESS_MODES = ("normal", "weak_related", "unrelated")


def generate_negatives(
    positive: ToolFunction,
    backend: GenerationBackend,
    templates: TemplateStore | None = None,
    max_tokens: int = 2048,
) -> list[ToolFunction]:
    """Generate up to two negative distractors for one positive function.

    Candidates must parse, carry documentation, and differ from the positive
    under dedup normalization; anything else is dropped. Negatives are not
    validated for correctness.
    """
    store = templates or default_templates()
    prompt = store.render("negative_functions", {"function": positive.source.strip("\n")})
    completion = generate(
        backend,
        GenerationRequest(
            prompt=prompt, temperature=0.0, n=1,
            max_tokens=max_tokens, template_id="negative_functions",
        ),
    )[0]
    code = extract_code_block(completion.text)
    try:
        sources = split_function_sources(code)
    except SyntaxError:
        sources = _salvage_function_sources(code)
    negatives: list[ToolFunction] = []
    positive_key = normalized_source(positive)
    for source in sources[:2]:
        try:
            fn = parse_function_document(
                source, domain=positive.domain, provenance="negative"
            )
        except Exception:
            continue  # unparseable or undocumented candidate: dropped
        if normalized_source(fn) == positive_key:
            continue  # identical to the positive after normalization: dropped
        negatives.append(fn)
    return negatives


def _salvage_function_sources(code: str) -> list[str]:
    """Split on def lines and keep the chunks that parse individually."""
    chunks: list[list[str]] = []
    for line in code.splitlines(keepends=True):
        if line.startswith("def ") or not chunks:
            chunks.append([])
        chunks[-1].append(line)
    out = []
    for chunk in chunks:
        text = "".join(chunk)
        if text.strip().startswith("def "):
            out.append(text)
    return out


def assemble_benchmark_toolset(
    positives: Sequence[ToolFunction],
    negatives: Sequence[ToolFunction],
    domain: str = "other",
) -> Toolset:
    """Merge positive and negative functions into one benchmark toolset.

    Dedup runs over the union with positives first, so a negative identical to
    a positive disappears. Name collisions are resolved by suffixing the
    negative's name with a numeric disambiguator (recorded on the function).
    """
    merged = dedup_functions(list(positives) + list(negatives))
    seen: dict[str, int] = {}
    resolved: list[ToolFunction] = []
    for fn in merged:
        if fn.name in seen:
            seen[fn.name] += 1
            fn = rename_function(fn, f"{fn.name}_{seen[fn.name]}")
        else:
            seen[fn.name] = 1
        resolved.append(fn)
    resolved.sort(key=lambda f: f.id)
    return Toolset.build(domain=domain, functions=resolved)


@dataclass(frozen=True)
class RobustnessMode:
    mode: str = "normal"
    substitute_toolset: Toolset | None = None

    def __post_init__(self):
        if self.mode not in ROBUSTNESS_MODES:
            raise ValueError(f"unknown robustness mode {self.mode!r}")
        if self.mode == "unrelated":
            if self.substitute_toolset is None or len(self.substitute_toolset) == 0:
                raise ValueError("unrelated mode requires a non-empty substitute toolset")


@dataclass(frozen=True)
class EffectiveRetrieval:
    """What retrieval actually runs over for one question under a mode."""

    toolset: Toolset
    excluded: frozenset[str]


def apply_robustness_setting(
    toolset: Toolset, question, mode: RobustnessMode
) -> EffectiveRetrieval:
    """Resolve the effective toolset and exclusion set for one question.

    normal: unchanged. weak_related: the question's own derived functions are
    excluded. unrelated: retrieval runs over the substitute toolset instead.
    """
    if mode.mode == "normal":
        return EffectiveRetrieval(toolset=toolset, excluded=frozenset())
    if mode.mode == "weak_related":
        links = tuple(question.derived_function_ids)
        if not links:
            raise MissingDerivationLinks(
                f"question {question.id} has no derivation links for weak_related mode"
            )
        return EffectiveRetrieval(toolset=toolset, excluded=frozenset(links))
    return EffectiveRetrieval(toolset=mode.substitute_toolset, excluded=frozenset())


def question_rng(seed: int, question_id: str) -> random.Random:
    """Per-question RNG keyed by run seed and question id.

    Worker scheduling can never change the draw a question sees.
    """
    return random.Random(f"{seed}:{question_id}")


def control_hit_ratio(
    retrieved: Sequence[str],
    positives_for_q: Iterable[str],
    target: float,
    rng: random.Random,
    pool_ranking: Sequence[str] | None = None,
) -> list[str]:
    """Force or forbid positive functions in one retrieved list, Bernoulli(target).

    With probability `target` the list is guaranteed at least one positive:
    the best-ranked positive is inserted at rank 1 and the last item evicted.
    Otherwise all positives are removed and the list is backfilled with the
    next-best non-positives from `pool_ranking`. Length is always preserved.
    """
    if not (0.0 <= target <= 1.0):
        raise ValueError("target must be in [0, 1]")
    k = len(retrieved)
    if k == 0:
        return []
    positives = set(positives_for_q)
    pool = list(pool_ranking) if pool_ranking is not None else list(retrieved)
    want_hit = rng.random() < target

    if want_hit:
        if any(fid in positives for fid in retrieved):
            return list(retrieved)
        best_positive = next((fid for fid in pool if fid in positives), None)
        if best_positive is None:
            raise InsufficientPool("no positive function available to insert")
        return [best_positive] + list(retrieved[: k - 1])

    kept = [fid for fid in retrieved if fid not in positives]
    if len(kept) < k:
        backfill = [
            fid for fid in pool
            if fid not in positives and fid not in kept
        ]
        kept += backfill[: k - len(kept)]
    if len(kept) < k:
        raise InsufficientPool(
            f"only {len(kept)} non-positive candidates available, need {k}"
        )
    return kept[:k]


def quota_hit_schedule(
    question_ids: Sequence[str], target: float, seed: int
) -> dict[str, bool]:
    """Deterministic-quota alternative: exactly round(target * n) hits.

    The hit set is a seeded sample of the question ids, for exact sweeps
    where Bernoulli noise is unwanted.
    """
    if not (0.0 <= target <= 1.0):
        raise ValueError("target must be in [0, 1]")
    ids = sorted(question_ids)
    n_hits = round(target * len(ids))
    rng = random.Random(f"quota:{seed}")
    hit_ids = set(rng.sample(ids, n_hits))
    return {qid: qid in hit_ids for qid in ids}


def filter_overdifficult(solution_outcomes: Sequence[bool]) -> bool:
    """Difficulty screen: keep a question unless all 24 jury solutions failed."""
    if len(solution_outcomes) != OVERDIFFICULT_OUTCOME_COUNT:
        raise WrongOutcomeCount(
            f"expected {OVERDIFFICULT_OUTCOME_COUNT} outcomes, got {len(solution_outcomes)}"
        )
    return any(solution_outcomes)
