"""toolflow: tool-augmented scientific reasoning over function toolsets.

Library + CLI for the full loop: parse and index toolsets of documented
Python functions, run the plan/retrieve/act/execute pipeline, build training
corpora and benchmark toolsets, and evaluate with tolerance-based grading.
"""

__version__ = "0.1.0"

from .grading import grade, is_correct, normalize_answer
from .pipeline import Question, solve
from .retrieval import HashedTfEmbedder, Query, build_index, retrieve
from .toolset import ToolFunction, Toolset, load_toolset, parse_function_document

__all__ = [
    "__version__",
    "ToolFunction",
    "Toolset",
    "parse_function_document",
    "load_toolset",
    "HashedTfEmbedder",
    "Query",
    "build_index",
    "retrieve",
    "normalize_answer",
    "is_correct",
    "grade",
    "Question",
    "solve",
]
