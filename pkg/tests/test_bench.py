from __future__ import annotations

import random

import pytest

from toolflow.bench import (
    OVERDIFFICULT_OUTCOME_COUNT,
    EffectiveRetrieval,
    RobustnessMode,
    apply_robustness_setting,
    assemble_benchmark_toolset,
    control_hit_ratio,
    filter_overdifficult,
    generate_negatives,
    quota_hit_schedule,
    question_rng,
)
from toolflow.errors import (
    InsufficientPool,
    MissingDerivationLinks,
    WrongOutcomeCount,
)
from toolflow.gateway import ReplayBackend, default_templates
from toolflow.pipeline import Question
from toolflow.toolset import (
    Toolset,
    normalized_source,
    parse_function_document,
    toolset_stats,
)

ANGULAR_FN = '''def angular_from_frequency(frequency):
    """Converts an ordinary frequency in hertz to an angular frequency.

    Parameters:
    - frequency (float): The frequency in hertz.

    Returns:
    - float: The angular frequency in radians per second.
    """
    import math
    return 2 * math.pi * frequency
'''

INVERSE_FN = '''def frequency_from_angular(angular_frequency):
    """Converts an angular frequency to an ordinary frequency in hertz.

    Parameters:
    - angular_frequency (float): The angular frequency in radians per second.

    Returns:
    - float: The frequency in hertz.
    """
    import math
    return angular_frequency / (2 * math.pi)
'''

ADJACENT_FN = '''def frequency_from_energy(photon_energy_j):
    """Computes a photon frequency from its energy.

    Parameters:
    - photon_energy_j (float): The photon energy in joules.

    Returns:
    - float: The frequency in hertz.
    """
    return photon_energy_j / 6.62607015e-34
'''


def _positive():
    return parse_function_document(ANGULAR_FN, domain="physics", provenance="positive")


def _negatives_backend(completion: str) -> ReplayBackend:
    backend = ReplayBackend()
    prompt = default_templates().render(
        "negative_functions", {"function": _positive().source.strip("\n")}
    )
    backend.add(prompt, completion, template_id="negative_functions")
    return backend


class TestGenerateNegatives:
    def test_two_valid_negatives(self):
        completion = f"```python\n{INVERSE_FN}\n{ADJACENT_FN}```\n"
        backend = _negatives_backend(completion)
        negatives = generate_negatives(_positive(), backend)
        assert [fn.name for fn in negatives] == [
            "frequency_from_angular", "frequency_from_energy",
        ]
        assert all(fn.provenance == "negative" for fn in negatives)
        assert all(fn.derived_from == () for fn in negatives)

    def test_candidate_identical_to_positive_dropped(self):
        completion = f"```python\n{ANGULAR_FN}\n{INVERSE_FN}```\n"
        backend = _negatives_backend(completion)
        negatives = generate_negatives(_positive(), backend)
        assert [fn.name for fn in negatives] == ["frequency_from_angular"]

    def test_unparseable_candidate_dropped(self):
        broken = "def broken(:\n    pass\n"
        completion = f"```python\n{INVERSE_FN}\n{broken}```\n"
        backend = _negatives_backend(completion)
        negatives = generate_negatives(_positive(), backend)
        assert [fn.name for fn in negatives] == ["frequency_from_angular"]

    def test_undocumented_candidate_dropped(self):
        undocumented = "def bare(x):\n    return x\n"
        completion = f"```python\n{undocumented}\n{INVERSE_FN}```\n"
        backend = _negatives_backend(completion)
        negatives = generate_negatives(_positive(), backend)
        assert [fn.name for fn in negatives] == ["frequency_from_angular"]


class TestAssemble:
    def test_merge_preserves_provenance(self):
        pos = [_positive()]
        neg = [
            parse_function_document(INVERSE_FN, domain="physics", provenance="negative"),
            parse_function_document(ADJACENT_FN, domain="physics", provenance="negative"),
        ]
        toolset = assemble_benchmark_toolset(pos, neg, domain="physics")
        assert len(toolset) == 3
        report = toolset_stats(toolset, [])
        assert report.n_positive == 1 and report.n_negative == 2

    def test_normalized_identical_negative_removed(self):
        pos = [_positive()]
        dup = parse_function_document(
            ANGULAR_FN.replace("    import math\n", "    import math  # radians\n"),
            domain="physics",
            provenance="negative",
        )
        assert normalized_source(dup) == normalized_source(pos[0])
        toolset = assemble_benchmark_toolset(pos, [dup], domain="physics")
        assert len(toolset) == 1
        assert toolset.functions[0].provenance == "positive"

    def test_empty_negatives(self):
        toolset = assemble_benchmark_toolset([_positive()], [], domain="physics")
        assert [fn.name for fn in toolset] == ["angular_from_frequency"]

    def test_name_collision_suffixes_negative(self):
        same_name_diff_body = ANGULAR_FN.replace(
            "return 2 * math.pi * frequency", "return 6.283185307 * frequency"
        )
        neg = parse_function_document(
            same_name_diff_body, domain="physics", provenance="negative"
        )
        toolset = assemble_benchmark_toolset([_positive()], [neg], domain="physics")
        names = sorted(fn.name for fn in toolset)
        assert names == ["angular_from_frequency", "angular_from_frequency_2"]
        renamed = next(fn for fn in toolset if fn.name.endswith("_2"))
        assert renamed.extra["renamed_from"] == "angular_from_frequency"

    def test_no_negative_identical_to_any_positive(self, bench_toolset):
        positives = [fn for fn in bench_toolset if fn.provenance == "positive"]
        negatives = [fn for fn in bench_toolset if fn.provenance == "negative"]
        pos_keys = {normalized_source(fn) for fn in positives}
        assert not any(normalized_source(fn) in pos_keys for fn in negatives)


def _question(qid="q1", links=("f1",)):
    return Question(
        id=qid, domain="physics", text="?", gold_answer="1",
        derived_function_ids=tuple(links),
    )


class TestRobustness:
    def _toolset(self):
        return Toolset.build("physics", [_positive()])

    def test_normal_mode_unchanged(self):
        ts = self._toolset()
        eff = apply_robustness_setting(ts, _question(), RobustnessMode("normal"))
        assert eff == EffectiveRetrieval(toolset=ts, excluded=frozenset())

    def test_weak_related_excludes_derived(self):
        ts = self._toolset()
        q = _question(links=("a", "b"))
        eff = apply_robustness_setting(ts, q, RobustnessMode("weak_related"))
        assert eff.excluded == frozenset({"a", "b"})
        assert eff.toolset is ts

    def test_weak_related_requires_links(self):
        q = _question(links=())
        with pytest.raises(MissingDerivationLinks):
            apply_robustness_setting(self._toolset(), q, RobustnessMode("weak_related"))

    def test_unrelated_substitutes_toolset(self, substitute_toolset):
        mode = RobustnessMode("unrelated", substitute_toolset=substitute_toolset)
        eff = apply_robustness_setting(self._toolset(), _question(), mode)
        assert eff.toolset is substitute_toolset
        assert eff.excluded == frozenset()

    def test_unrelated_requires_substitute(self):
        with pytest.raises(ValueError):
            RobustnessMode("unrelated")


class TestHitRatioControl:
    POOL = [f"f{i}" for i in range(10)]

    def _rng(self):
        return random.Random(123)

    def test_target_one_guarantees_positive(self):
        retrieved = ["f3", "f4", "f5"]
        out = control_hit_ratio(retrieved, {"f9"}, 1.0, self._rng(), self.POOL)
        assert out[0] == "f9"
        assert len(out) == 3
        assert out[1:] == ["f3", "f4"]

    def test_target_one_keeps_existing_positive(self):
        retrieved = ["f3", "f9", "f5"]
        out = control_hit_ratio(retrieved, {"f9"}, 1.0, self._rng(), self.POOL)
        assert out == retrieved

    def test_target_zero_removes_positives(self):
        retrieved = ["f3", "f9", "f5"]
        out = control_hit_ratio(retrieved, {"f9"}, 0.0, self._rng(), self.POOL)
        assert "f9" not in out
        assert len(out) == 3
        assert out[:2] == ["f3", "f5"]

    def test_backfill_preserves_rank_order(self):
        retrieved = ["f9", "f8", "f7"]
        out = control_hit_ratio(retrieved, {"f9", "f8", "f7"}, 0.0, self._rng(), self.POOL)
        assert out == ["f0", "f1", "f2"]

    def test_insufficient_pool(self):
        retrieved = ["f0", "f1", "f2"]
        with pytest.raises(InsufficientPool):
            control_hit_ratio(retrieved, set(self.POOL), 0.0, self._rng(), self.POOL)

    def test_length_always_k(self):
        rng = random.Random(5)
        for target in (0.0, 0.3, 0.7, 1.0):
            out = control_hit_ratio(["f1", "f9", "f2"], {"f9"}, target, rng, self.POOL)
            assert len(out) == 3

    def test_deterministic_for_seed(self):
        a = control_hit_ratio(["f1", "f2", "f3"], {"f9"}, 0.5,
                              question_rng(7, "q1"), self.POOL)
        b = control_hit_ratio(["f1", "f2", "f3"], {"f9"}, 0.5,
                              question_rng(7, "q1"), self.POOL)
        assert a == b

    def test_empty_retrieved(self):
        assert control_hit_ratio([], {"f1"}, 1.0, self._rng(), self.POOL) == []

    def test_seeded_fraction_near_target(self):
        hits = 0
        for i in range(200):
            out = control_hit_ratio(
                ["f1", "f2", "f3"], {"f9"}, 0.5, question_rng(11, f"q{i}"), self.POOL
            )
            hits += "f9" in out
        assert abs(hits / 200 - 0.5) <= 0.1

    def test_quota_schedule_exact(self):
        ids = [f"q{i}" for i in range(40)]
        schedule = quota_hit_schedule(ids, 0.25, seed=3)
        assert sum(schedule.values()) == 10
        assert quota_hit_schedule(ids, 0.25, seed=3) == schedule


class TestOverdifficult:
    def test_all_false_drops(self):
        assert filter_overdifficult([False] * OVERDIFFICULT_OUTCOME_COUNT) is False

    def test_single_success_keeps(self):
        outcomes = [False] * (OVERDIFFICULT_OUTCOME_COUNT - 1) + [True]
        assert filter_overdifficult(outcomes) is True

    def test_wrong_count(self):
        with pytest.raises(WrongOutcomeCount):
            filter_overdifficult([True] * 23)
