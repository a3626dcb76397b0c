"""Answer normalization and tolerance-based correctness decisions.

Accuracy everywhere in toolflow is defined by `normalize_answer` +
`is_correct`. Numeric comparison is gold-anchored:
|pred - gold| <= max(abs_tol, rel_tol * |gold|).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Any

DEFAULT_REL_TOL = 1e-2
DEFAULT_ABS_TOL = 1e-6

_CURRENCY = "$€£¥"
_NUMBER_RE = re.compile(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?")
_INT_RE = re.compile(r"[+-]?\d+")
_FRACTION_RE = re.compile(r"([+-]?\d+)\s*/\s*(\d+)")
_CHOICE_RE = re.compile(r"\(?([A-Ea-e])\)?\.?")


@dataclass(frozen=True)
class CanonicalAnswer:
    """A parsed answer value plus the transformations applied to reach it."""

    kind: str  # number | integer | boolean | choice_letter | tuple_of_numbers | text
    value: Any
    from_percent: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.kind == "number" and not math.isfinite(self.value):
            raise ValueError(f"non-finite number answer: {self.value!r}")
        if self.kind == "tuple_of_numbers" and not all(math.isfinite(v) for v in self.value):
            raise ValueError(f"non-finite tuple element: {self.value!r}")


def _parse_scalar(text: str) -> tuple[str, Any] | None:
    """Parse one trimmed token as integer/number/fraction; None if not numeric."""
    if _INT_RE.fullmatch(text):
        return "integer", int(text)
    if _NUMBER_RE.fullmatch(text):
        return "number", float(text)
    m = _FRACTION_RE.fullmatch(text)
    if m and int(m.group(2)) != 0:
        return "number", int(m.group(1)) / int(m.group(2))
    return None


def normalize_answer(raw: Any) -> CanonicalAnswer:
    """Parse a raw answer string into its canonical form.

    Handles surrounding whitespace and currency symbols, percent values
    (divided by 100, recorded), scientific notation, simple fractions,
    bracketed tuples, choice letters A-E, and booleans. Anything else becomes
    case-folded trimmed text.
    """
    if isinstance(raw, bool):
        return CanonicalAnswer("boolean", raw)
    if isinstance(raw, int):
        return CanonicalAnswer("integer", raw)
    if isinstance(raw, float):
        if math.isfinite(raw):
            return CanonicalAnswer("number", raw)
        return CanonicalAnswer("text", str(raw))
    if isinstance(raw, (tuple, list)):
        values = tuple(float(v) for v in raw)
        if all(math.isfinite(v) for v in values):
            return CanonicalAnswer("tuple_of_numbers", values)
        return CanonicalAnswer("text", str(raw).casefold())

    text = str(raw).strip()
    if not text:
        return CanonicalAnswer("text", "")

    lowered = text.lower()
    if lowered in ("true", "false"):
        return CanonicalAnswer("boolean", lowered == "true")

    stripped = text.strip().strip(_CURRENCY).strip()
    from_percent = False
    if stripped.endswith("%"):
        from_percent = True
        stripped = stripped[:-1].strip()
    stripped = stripped.replace(",", "") if _looks_numeric(stripped.replace(",", "")) else stripped

    if (stripped.startswith("(") and stripped.endswith(")")) or (
        stripped.startswith("[") and stripped.endswith("]")
    ):
        inner = stripped[1:-1]
        parts = [p.strip() for p in inner.split(",") if p.strip()]
        parsed = [_parse_scalar(p) for p in parts]
        if len(parsed) >= 2 and all(p is not None for p in parsed):
            values = tuple(float(p[1]) for p in parsed)  # type: ignore[index]
            return CanonicalAnswer("tuple_of_numbers", values, from_percent=from_percent)

    scalar = _parse_scalar(stripped)
    if scalar is not None:
        kind, value = scalar
        if from_percent:
            return CanonicalAnswer("number", float(value) / 100.0, from_percent=True)
        return CanonicalAnswer(kind, value)

    if len(text) == 1 and _CHOICE_RE.fullmatch(text):
        return CanonicalAnswer("choice_letter", text.upper())

    return CanonicalAnswer("text", text.casefold())


def _looks_numeric(text: str) -> bool:
    return bool(_NUMBER_RE.fullmatch(text) or _INT_RE.fullmatch(text))


def _close(pred: float, gold: float, rel_tol: float, abs_tol: float) -> bool:
    return abs(pred - gold) <= max(abs_tol, rel_tol * abs(gold))


_NUMERIC_KINDS = {"number", "integer"}


def is_correct(
    pred: CanonicalAnswer,
    gold: CanonicalAnswer,
    rel_tol: float = DEFAULT_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
) -> bool:
    """Decide correctness of a predicted answer against gold.

    Numbers compare within gold-anchored tolerance; tuples elementwise with
    matching arity; choice letters and booleans exactly; text case-insensitively.
    Number/integer cross-kind comparisons are numeric; any other kind mismatch
    is incorrect.
    """
    if rel_tol < 0 or abs_tol < 0:
        raise ValueError("tolerances must be non-negative")
    if pred.kind in _NUMERIC_KINDS and gold.kind in _NUMERIC_KINDS:
        return _close(float(pred.value), float(gold.value), rel_tol, abs_tol)
    if pred.kind != gold.kind:
        return False
    if pred.kind == "tuple_of_numbers":
        if len(pred.value) != len(gold.value):
            return False
        return all(
            _close(p, g, rel_tol, abs_tol) for p, g in zip(pred.value, gold.value)
        )
    if pred.kind == "text":
        return pred.value == gold.value
    return pred.value == gold.value


def grade(
    raw_pred: Any,
    raw_gold: Any,
    rel_tol: float = DEFAULT_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
) -> bool:
    """Normalize both sides and decide correctness."""
    return is_correct(normalize_answer(raw_pred), normalize_answer(raw_gold), rel_tol, abs_tol)
