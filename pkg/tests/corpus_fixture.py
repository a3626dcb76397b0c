"""Deterministic corpus-construction fixture: 8 seeds, 5 accepted bundles.

Builds an in-memory replay store and golden execution results covering both
corpus phases. Phase-two prompts depend on the accumulated toolset, so the
builder dry-runs phase one with the same library calls the pipeline uses.

Designed outcomes:
  s1  accepted, greedy candidate correct
  s2  accepted after one rectification round (NameError fixed)
  s3  accepted; its fa generation later fails all 6 attempts
  s4  accepted (two functions); its ff generation fails all 6 attempts
  s5  accepted; shares byte-identical functions with s1 and s3 (dedup+merge)
  s6  rejected: persistent TypeError through max_iters rectifications
  s7  rejected: executes fine but answers wrong
  s8  rejected: completion is missing its FUNCTIONS section
"""

from __future__ import annotations

from dataclasses import dataclass

from toolflow.corpus import (
    CorpusConfig,
    SeedQuestion,
    accumulate_toolset,
    cross_retrieve,
    generate_candidates,
    rectify_loop,
)
from toolflow.gateway import ReplayBackend, default_templates
from toolflow.pipeline import parse_solution, render_functions_block
from toolflow.retrieval import HashedTfEmbedder, build_index
from toolflow.sandbox import ExecutionLimits, ExecutionResult, RecordedExecutor, assemble_program

ADD_FN = '''def add_numbers(a, b):
    """Adds two numbers together and returns their sum."""
    return a + b
'''

MULTIPLY_FN = '''def multiply_numbers(a, b):
    """Multiplies two numbers together and returns the product."""
    return a * b
'''

SQUARE_FN = '''def square_number(x):
    """Squares a number and returns the result."""
    return x * x
'''

CUBE_FN = '''def cube_number(x):
    """Cubes a number and returns the result."""
    return x * x * x
'''

POWER_FN = '''def power_number(base, exponent):
    """Raises a base to a non-negative integer exponent."""
    result = 1
    for _ in range(exponent):
        result = result * base
    return result
'''

HALVE_FN = '''def halve_number(x):
    """Halves a number and returns the result."""
    return x / 2
'''

SUBTRACT_FN = '''def subtract_numbers(a, b):
    """Subtracts the second number from the first."""
    return a - b
'''


def _candidate(planning: str, functions: str, solution: str) -> str:
    return (
        f"PLANNING:\n{planning}\n\n"
        f"FUNCTIONS:\n```python\n{functions}```\n\n"
        f"SOLUTION:\n```python\n{solution}```\n"
    )


def _ok(value: str) -> ExecutionResult:
    return ExecutionResult(verdict="ok", stdout=f"{value}\n", answer_text=value)


def _err(error_type: str, message: str) -> ExecutionResult:
    return ExecutionResult(
        verdict="runtime_error", error_type=error_type, error_message=message
    )


@dataclass
class CorpusFixture:
    seeds: list[SeedQuestion]
    backend: ReplayBackend
    executor: RecordedExecutor
    embedder: HashedTfEmbedder
    config: CorpusConfig


def _seed(sid: str, text: str, gold: str) -> SeedQuestion:
    return SeedQuestion(
        id=sid, domain="math", text=text,
        gold_solution=f"Reasoning for {sid}: the answer is {gold}.",
        gold_answer=gold,
    )


def build_corpus_fixture() -> CorpusFixture:
    templates = default_templates()
    backend = ReplayBackend()
    executor = RecordedExecutor([])
    embedder = HashedTfEmbedder()
    config = CorpusConfig(limits=ExecutionLimits(wall_time=5.0))

    seeds = [
        _seed("s1", "What is two plus three when you add the numbers?", "5"),
        _seed("s2", "Multiply four by six. What is the product of the numbers?", "24"),
        _seed("s3", "What is the square of seven?", "49"),
        _seed("s4", "What is the cube of two when raised as a power?", "8"),
        _seed("s5", "Add two and three, then square the sum of the numbers.", "25"),
        _seed("s6", "What is half of ten?", "5"),
        _seed("s7", "What is nine minus four when you subtract the numbers?", "5"),
        _seed("s8", "What is one plus two?", "3"),
    ]
    by_id = {s.id: s for s in seeds}

    def add_candidate(sid: str, completion: str):
        seed = by_id[sid]
        prompt = templates.render(
            "toolset_construct",
            {"question": seed.text, "solution": seed.gold_solution},
        )
        backend.add(prompt, completion, template_id="toolset_construct")

    def golden(functions_code: list[str], solution_code: str, result: ExecutionResult):
        from toolflow.toolset import parse_function_document

        fns = [
            parse_function_document(src, domain="math", provenance="generated")
            for src in functions_code
        ]
        program = assemble_program(parse_solution(f"```python\n{solution_code}```\n"), fns)
        executor.add(program, result)

    # --- phase one records -----------------------------------------------

    s1_solution = "result = add_numbers(2, 3)\nprint(result)\n"
    add_candidate("s1", _candidate("(1) Add the two numbers.", ADD_FN, s1_solution))
    golden([ADD_FN], s1_solution, _ok("5"))

    s2_bad = "total = multiply_numbers(4, 6)\nprint(answer)\n"
    s2_good = "total = multiply_numbers(4, 6)\nprint(total)\n"
    # error text captured from a real runner execution of the assembled program
    s2_error = _err("NameError", "name 'answer' is not defined (line 6 in <module>)")
    add_candidate("s2", _candidate("(1) Multiply the two numbers.", MULTIPLY_FN, s2_bad))
    golden([MULTIPLY_FN], s2_bad, s2_error)
    golden([MULTIPLY_FN], s2_good, _ok("24"))
    rectify_prompt = templates.render(
        "rectify",
        {
            "question": by_id["s2"].text,
            "functions": MULTIPLY_FN.strip("\n"),
            "solution": s2_bad.strip("\n"),
            "error_type": s2_error.error_type,
            "error_message": s2_error.error_message,
        },
    )
    backend.add(
        rectify_prompt,
        f"FUNCTIONS:\n```python\n{MULTIPLY_FN}```\n\nSOLUTION:\n```python\n{s2_good}```\n",
        template_id="rectify",
    )

    s3_solution = "print(square_number(7))\n"
    add_candidate("s3", _candidate("(1) Square the number.", SQUARE_FN, s3_solution))
    golden([SQUARE_FN], s3_solution, _ok("49"))

    s4_solution = "print(cube_number(2))\n"
    add_candidate(
        "s4",
        _candidate("(1) Cube the number.", CUBE_FN + "\n" + POWER_FN, s4_solution),
    )
    golden([CUBE_FN, POWER_FN], s4_solution, _ok("8"))

    s5_solution = "print(square_number(add_numbers(2, 3)))\n"
    add_candidate(
        "s5",
        _candidate(
            "(1) Add the numbers.\n(2) Square the sum.",
            ADD_FN + "\n" + SQUARE_FN,
            s5_solution,
        ),
    )
    golden([ADD_FN, SQUARE_FN], s5_solution, _ok("25"))

    s6_solution = 'print(halve_number("ten"))\n'
    s6_error = _err(
        "TypeError", "unsupported operand type(s) for /: 'str' and 'int' (line 3 in halve_number)"
    )
    add_candidate("s6", _candidate("(1) Halve the number.", HALVE_FN, s6_solution))
    golden([HALVE_FN], s6_solution, s6_error)
    s6_rectify_prompt = templates.render(
        "rectify",
        {
            "question": by_id["s6"].text,
            "functions": HALVE_FN.strip("\n"),
            "solution": s6_solution.strip("\n"),
            "error_type": s6_error.error_type,
            "error_message": s6_error.error_message,
        },
    )
    # the "fix" returns the identical bundle, so the loop repeats to max_iters
    backend.add(
        s6_rectify_prompt,
        f"FUNCTIONS:\n```python\n{HALVE_FN}```\n\nSOLUTION:\n```python\n{s6_solution}```\n",
        template_id="rectify",
    )

    s7_solution = "print(subtract_numbers(9, 4) - 1)\n"
    add_candidate("s7", _candidate("(1) Subtract the numbers.", SUBTRACT_FN, s7_solution))
    golden([SUBTRACT_FN], s7_solution, _ok("4"))  # wrong answer, clean execution

    add_candidate("s8", "PLANNING:\n(1) Add one and two.\n\nSOLUTION:\n```python\nprint(3)\n```\n")

    # --- dry-run phase one to learn the accumulated toolset -----------------

    bundles = []
    for seed in seeds:
        bundle = generate_candidates(seed, backend, executor, config, templates)
        if bundle.solution is not None:
            bundle = rectify_loop(bundle, seed, backend, executor, config, templates)
        bundles.append(bundle)
    toolset = accumulate_toolset(bundles, domain="math")
    index = build_index(toolset, embedder)
    resolve = toolset.by_id()

    # --- phase two records ---------------------------------------------------

    fa_programs = {
        "s1": ("print(2 + 3)\n", "5"),
        "s4": ("print(2 * 2 * 2)\n", "8"),
        "s5": ("print((2 + 3) ** 2)\n", "25"),
        "s6": ("print(10 // 2)\n", "5"),
        "s7": ("print(9 - 4)\n", "5"),
        "s8": ("print(1 + 2)\n", "3"),
    }

    for bundle, seed in zip(bundles, seeds):
        own_ids = {fn.id for fn in bundle.functions}
        ranked = cross_retrieve(
            seed.text, bundle.planning, index, embedder, own_ids, k=config.k
        )
        functions = [resolve[fid] for fid, _ in ranked]
        prompt = templates.render(
            "cross_retrieval_solution",
            {"question": seed.text, "functions": render_functions_block(functions)},
        )

        def fa_golden(code: str, result: ExecutionResult):
            program = assemble_program(parse_solution(f"```python\n{code}```\n"), functions)
            executor.add(program, result)

        if seed.id == "s2":
            # greedy wrong; the n=5 fetch reuses index 0, then index 1 succeeds
            backend.add(prompt, "```python\nprint(0)\n```\n", index=0,
                        template_id="cross_retrieval_solution")
            backend.add(prompt, "```python\nprint(4 * 6)\n```\n", index=1,
                        template_id="cross_retrieval_solution")
            for i in (2, 3, 4):
                backend.add(prompt, "```python\nprint(99)\n```\n", index=i,
                            template_id="cross_retrieval_solution")
            fa_golden("print(0)\n", _ok("0"))
            fa_golden("print(4 * 6)\n", _ok("24"))
        elif seed.id == "s3":
            # every attempt fails: wrong answers plus one runtime error
            backend.add(prompt, "```python\nprint(7)\n```\n", index=0,
                        template_id="cross_retrieval_solution")
            fa_golden("print(7)\n", _ok("7"))
            wrongs = {1: "print(14)\n", 3: "print(21)\n", 4: "print(28)\n"}
            for i, code in wrongs.items():
                backend.add(prompt, f"```python\n{code}```\n", index=i,
                            template_id="cross_retrieval_solution")
                fa_golden(code, _ok(code.strip("print()\n")))
            backend.add(prompt, "```python\nraise ValueError('nope')\n```\n", index=2,
                        template_id="cross_retrieval_solution")
            fa_golden(
                "raise ValueError('nope')\n",
                _err("ValueError", "nope (line 1 in <module>)"),
            )
        else:
            code, answer = fa_programs[seed.id]
            backend.add(prompt, f"```python\n{code}```\n", index=0,
                        template_id="cross_retrieval_solution")
            fa_golden(code, _ok(answer))

        # function-free generation
        ff_prompt = templates.render("eval_without_tools", {"question": seed.text})
        if seed.id == "s4":
            backend.add(ff_prompt, "the cube is eight", index=0,
                        template_id="eval_without_tools")
            codes = {1: "print(6)\n", 2: "raise RuntimeError('bad')\n",
                     3: "print(4)\n", 4: "print(2)\n"}
            for i, code in codes.items():
                backend.add(ff_prompt, f"```python\n{code}```\n", index=i,
                            template_id="eval_without_tools")
                if code.startswith("print"):
                    executor.add(code, _ok(code.strip("print()\n")))
                else:
                    executor.add(code, _err("RuntimeError", "bad (line 1 in <module>)"))
        else:
            code, answer = {
                "s1": ("print(5)\n", "5"),
                "s2": ("print(24)\n", "24"),
                "s3": ("print(49)\n", "49"),
                "s5": ("print(25)\n", "25"),
                "s6": ("print(5)\n", "5"),
                "s7": ("print(5)\n", "5"),
                "s8": ("print(3)\n", "3"),
            }[seed.id]
            backend.add(ff_prompt, f"```python\n{code}```\n", index=0,
                        template_id="eval_without_tools")
            executor.add(code, _ok(answer))

    return CorpusFixture(
        seeds=seeds, backend=backend, executor=executor,
        embedder=embedder, config=config,
    )
