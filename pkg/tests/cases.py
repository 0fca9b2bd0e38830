"""Shared replay fixtures.

Three worked solutions are frozen here as scripted backend replies plus
scripted executor results, so the whole engine can be driven end to end
with no model and no sandbox.  Replies keyed on an output section only
match second-phase prompts (first-phase prompts never contain one), and
they are listed first so they win pool position 0 at seed 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from mcot.backend import (
    Backend,
    BackendHub,
    BackendRole,
    CompletionRequest,
    CompletionResponse,
    MockBackend,
    MockRule,
)
from mcot.chain import (
    DerivationStep,
    ExecStatus,
    ExecutionResult,
    Trajectory,
)
from mcot.executor import ScriptedExecutor, ScriptedResult
from mcot.reasoners import RunRecord, SolveConfig, solve
from mcot.tokens import approx_token_count


class RecordingBackend(MockBackend):
    """Mock that also keeps every prompt it was asked to complete."""

    def __init__(self, rules, seed: int = 0) -> None:
        super().__init__(rules, seed=seed)
        self.prompts: list[str] = []

    def _complete_variant(self, request: CompletionRequest, variant: int) -> CompletionResponse:
        self.prompts.append(request.prompt)
        return super()._complete_variant(request, variant)


@dataclass(frozen=True)
class ReplayCase:
    name: str
    question: str
    gold_answer: str
    final_answer: str
    chain_length: int
    accepted: bool
    spliced_stderr: str | None
    observations: tuple[str, ...]
    mock_rules: tuple[MockRule, ...]
    exec_rules: tuple[ScriptedResult, ...]

    def mock_script_jsonl(self) -> str:
        lines = []
        for rule in self.mock_rules:
            lines.append(json.dumps({"match": rule.match, "reply": rule.reply}))
        return "\n".join(lines) + "\n"

    def exec_script_jsonl(self) -> str:
        lines = []
        for rule in self.exec_rules:
            lines.append(
                json.dumps(
                    {
                        "match": rule.match,
                        "status": rule.result.status.value,
                        "stdout": rule.result.stdout,
                        "stderr": rule.result.stderr,
                        "wall_time_s": rule.result.wall_time,
                    }
                )
            )
        return "\n".join(lines) + "\n"


def run_case(
    case: ReplayCase, strategy: str = "mcot", seed: int = 0,
    config: SolveConfig = SolveConfig(),
) -> tuple[RunRecord, RecordingBackend, ScriptedExecutor]:
    backend = RecordingBackend(case.mock_rules, seed=seed)
    hub = BackendHub({BackendRole.SOLVER: backend})
    executor = ScriptedExecutor(case.exec_rules)
    record = solve(strategy, case.question, hub, executor, config)
    return record, backend, executor


def _output_key(text: str) -> str:
    return f"<output>\n{text}\n</output>"


def _step_reply(analysis: str, code: str) -> str:
    return f"{analysis}\n\n<code>\n{code}\n</code>"


# -- quadratic root coefficient (recovers from a NameError) -------------------

_QUADRATIC_Q = (
    r"For what real value of \(k\) is \(\frac{13-\sqrt{131}}{4}\) a root "
    r"of \(2x^2-13x+k\)?"
)

_QUADRATIC_ANALYSIS_1 = (
    r"To find the value of \(k\) for which \(\frac{13-\sqrt{131}}{4}\) is a root "
    r"of the quadratic equation \(2x^2-13x+k=0\), we can substitute the root "
    r"into the equation and solve for \(k\)."
)

_QUADRATIC_CODE_1 = """\
from sympy import symbols, sqrt, solve

# Define the variable and the root
x = symbols('x')
root = (13 - sqrt(131)) / 4

# Define the quadratic equation
equation = 2*x**2 - 13*x + k

# Substitute the root into the equation and solve for k
k_value = solve(equation.subs(x, root), k)
print(k_value)"""

_QUADRATIC_NAME_ERROR = "NameError: name 'k' is not defined"

_QUADRATIC_SUBQ = (
    r"Given the quadratic equation \(2x^2-13x+k=0\), what is the correct Python "
    r"code to solve for the value of \(k\) if \(\frac{13-\sqrt{131}}{4}\) is a "
    r"root of the equation?"
)

_QUADRATIC_ANALYSIS_2 = (
    r"To find the value of \(k\), we can use the fact that if "
    r"\(\frac{13-\sqrt{131}}{4}\) is a root of the quadratic equation "
    r"\(2x^2-13x+k=0\), then the other root must be \(\frac{13+\sqrt{131}}{4}\). "
    r"This is because the sum of the roots of a quadratic equation is given by "
    r"\(-\frac{b}{a}\), where \(a\) and \(b\) are the coefficients of \(x^2\) "
    r"and \(x\) respectively. In our case, \(-\frac{b}{a} = \frac{13}{2}\), so "
    r"the sum of the roots is \(\frac{13}{2}\). Therefore, we can find \(k\) by "
    r"multiplying the roots."
)

_QUADRATIC_CODE_2 = """\
from sympy import symbols, sqrt, simplify

# Define the variable
k = symbols('k')

# Define the roots
root1 = (13 - sqrt(131)) / 4
root2 = (13 + sqrt(131)) / 4

# Calculate the product of the roots (which gives us k)
product_of_roots = simplify(root1 * root2)
print(product_of_roots)"""

_QUADRATIC_CLOSE = (
    r"From the result, we can see that the product of the roots is "
    r"\(\frac{19}{8}\). Since the product of the roots is also equal to "
    r"\(\frac{k}{a}\), and \(a = 2\) for our quadratic equation, we can find "
    r"the value of \(k\) by multiplying the product of the roots by \(a\)."
    "\n"
    r"Final Answer: \(\frac{19}{4}\)"
)

QUADRATIC_CASE = ReplayCase(
    name="quadratic-root-coefficient",
    question=_QUADRATIC_Q,
    gold_answer=r"\frac{19}{4}",
    final_answer=r"\frac{19}{4}",
    chain_length=2,
    accepted=True,
    spliced_stderr=_QUADRATIC_NAME_ERROR,
    observations=(_QUADRATIC_NAME_ERROR, "19/8"),
    mock_rules=(
        MockRule(
            match=_output_key(_QUADRATIC_NAME_ERROR),
            reply=f"\nSub Question: {_QUADRATIC_SUBQ}\n</solution>",
        ),
        MockRule(
            match=_output_key("19/8"),
            reply=f"\n{_QUADRATIC_CLOSE}\n</solution>",
        ),
        MockRule(
            match="For what real value of",
            reply=_step_reply(_QUADRATIC_ANALYSIS_1, _QUADRATIC_CODE_1),
        ),
        MockRule(
            match="what is the correct Python code to solve",
            reply=_step_reply(_QUADRATIC_ANALYSIS_2, _QUADRATIC_CODE_2),
        ),
    ),
    exec_rules=(
        ScriptedResult(
            match="equation = 2*x**2 - 13*x + k",
            result=ExecutionResult(
                status=ExecStatus.ERROR, stderr=_QUADRATIC_NAME_ERROR, wall_time=0.02,
            ),
        ),
        ScriptedResult(
            match="product_of_roots = simplify(root1 * root2)",
            result=ExecutionResult(
                status=ExecStatus.OK, stdout="19/8\n", wall_time=0.03,
            ),
        ),
    ),
)


# -- inequality count (recovers from an AttributeError) ------------------------

_INEQ_Q = (
    r"For how many positive integral values of \(a\) is it true that \(x = 2\) "
    r"is the only positive integer solution of the system of inequalities "
    r"\(2x > 3x - 3\) and \(3x - a > -6\)?"
)

_INEQ_ANALYSIS_1 = (
    r"To find the positive integral values of \(a\) for which \(x = 2\) is the "
    r"only positive integer solution to the system of inequalities, we need to "
    r"solve the inequalities for \(x\) and then find the constraints on \(a\)."
    "\n"
    r"The first inequality \(2x > 3x - 3\) simplifies to \(x < 3\). This tells "
    r"us that \(x\) must be less than 3."
    "\n"
    r"The second inequality \(3x - a > -6\) can be simplified by adding \(a\) to "
    r"both sides and then dividing by 3 to get \(x > \frac{a}{3} - 2\)."
    "\n"
    r"Therefore, we need to find the range of \(a\) such that "
    r"\(2 \leq \frac{a}{3} - 2 < 3\)."
)

_INEQ_CODE_1 = """\
from sympy import symbols, solve, S

# Define the variable
a = symbols('a', real=True, positive=True)

# Inequality 1: 2 <= a/3 - 2
ineq1 = a/3 - 2 >= 2

# Inequality 2: a/3 - 2 < 3
ineq2 = a/3 - 2 < 3

# Solve the inequalities
solution1 = solve(ineq1, a)
solution2 = solve(ineq2, a)

# Find the intersection of the solutions
intersection = (S.Intersection(solution1, solution2)).evalf()
print(intersection)"""

_INEQ_ATTR_ERROR = (
    "AttributeError: Attribute 'Intersection' was not installed on SymPy registry S"
)

_INEQ_SUBQ_1 = (
    r"Given the inequalities \(2 \leq \frac{a}{3} - 2 < 3\), for how many "
    r"positive integral values of \(a\) is \(a\) within the range found?"
)

_INEQ_ANALYSIS_2 = (
    r"The given inequalities are \(2 \leq \frac{a}{3} - 2 < 3\). To find the "
    r"range of \(a\), we need to solve these inequalities for \(a\)."
)

_INEQ_CODE_2 = """\
from sympy import symbols, solve, S

# Define the variable
a = symbols('a')

# Define the inequalities
ineq1 = 2 <= a/3 - 2
ineq2 = a/3 - 2 < 3

# Solve the inequalities
solution1 = solve(ineq1, a)
solution2 = solve(ineq2, a)

print(solution1, solution2)"""

_INEQ_OUTPUT_2 = "(12 <= a) & (a < oo) (-oo < a) & (a < 15)"

_INEQ_SUBQ_2 = (
    r"For how many positive integral values of \(a\) is \(a\) within the range "
    r"\(12 \leq a < 15\)?"
)

_INEQ_FINAL_PROSE = (
    r"The task is to determine the number of positive integral values of \(a\) "
    r"that lie within the range \(12 \leq a < 15\). Since \(a\) must be an "
    r"integer, we can simply list the integers within this range."
    "\n"
    r"The integers that satisfy \(12 \leq a < 15\) are 12, 13, and 14. There "
    r"are three such integers, so the answer is 3."
    "\n"
    r"Final Answer: \(3\)"
)

INEQUALITY_CASE = ReplayCase(
    name="inequality-count",
    question=_INEQ_Q,
    gold_answer="3",
    final_answer="3",
    chain_length=3,
    accepted=True,
    spliced_stderr=_INEQ_ATTR_ERROR,
    observations=(_INEQ_ATTR_ERROR, _INEQ_OUTPUT_2),
    mock_rules=(
        MockRule(
            match=_output_key(_INEQ_ATTR_ERROR),
            reply=f"\nSub Question: {_INEQ_SUBQ_1}\n</solution>",
        ),
        MockRule(
            match=_output_key(_INEQ_OUTPUT_2),
            reply=f"\nSub Question: {_INEQ_SUBQ_2}\n</solution>",
        ),
        MockRule(
            match=r"is it true that \(x = 2\)",
            reply=_step_reply(_INEQ_ANALYSIS_1, _INEQ_CODE_1),
        ),
        MockRule(
            match="within the range found",
            reply=_step_reply(_INEQ_ANALYSIS_2, _INEQ_CODE_2),
        ),
        MockRule(
            match=r"within the range \(12 \leq a < 15\)",
            reply=f"{_INEQ_FINAL_PROSE}\n</solution>",
        ),
    ),
    exec_rules=(
        ScriptedResult(
            match="S.Intersection",
            result=ExecutionResult(
                status=ExecStatus.ERROR, stderr=_INEQ_ATTR_ERROR, wall_time=0.05,
            ),
        ),
        ScriptedResult(
            match="print(solution1, solution2)",
            result=ExecutionResult(
                status=ExecStatus.OK, stdout=_INEQ_OUTPUT_2 + "\n", wall_time=0.04,
            ),
        ),
    ),
)


# -- letter arrangements (confidently wrong; verifier must reject) -------------

_BANANA_Q = (
    "In how many ways can the letters of the word BANANA be rearranged such "
    "that the new word does not begin with a B?"
)

_BANANA_ANALYSIS_1 = (
    "To find the number of ways to rearrange the letters of the word BANANA "
    "such that the new word does not begin with a B, we can first find the "
    "total number of rearrangements of the word BANANA and then subtract the "
    "number of rearrangements that start with a B."
)

_BANANA_CODE_1 = """\
from math import factorial

# Total number of letters in BANANA is 6 (with A repeating 3 times)
# So the total number of rearrangements is 6! / (3!)
total_rearrangements = factorial(6) // factorial(3)
print(total_rearrangements)"""

_BANANA_SUBQ_1 = (
    "Given that there are 120 ways to rearrange the letters of the word "
    "BANANA, how many of these rearrangements do not start with the letter B?"
)

_BANANA_ANALYSIS_2 = (
    "To find the number of rearrangements of the word BANANA that do not "
    "start with the letter B, we can first find the total number of "
    "rearrangements and then subtract the number of rearrangements that do "
    "start with the letter B. The total number of rearrangements of a word "
    "with repeated letters can be calculated using the formula for "
    "permutations of a multiset."
)

_BANANA_CODE_2 = """\
from math import factorial

# Total number of letters in BANANA
n = 6
# Frequency of each letter: A - 3 times, B - 1 time, N - 2 times
n_A = 3
n_B = 1
n_N = 2

# Total number of rearrangements
total_rearrangements = factorial(n) // (factorial(n_A) * factorial(n_B) * factorial(n_N))
print(total_rearrangements)"""

_BANANA_SUBQ_2 = (
    "If there are 60 ways to rearrange the letters of the word BANANA, how "
    "many of these rearrangements start with the letter B?"
)

_BANANA_ANALYSIS_3 = (
    "To find the number of rearrangements of the letters of the word BANANA "
    "that start with the letter B, we can consider the remaining 5 letters "
    "that can be arranged in any order after fixing the first letter B. Since "
    "the first letter is fixed as B, we have 5 remaining letters (A, N, A, N, "
    "A) to arrange. We need to calculate the number of unique arrangements of "
    "these 5 letters."
)

_BANANA_CODE_3 = """\
import math

# Calculate the number of unique arrangements of 5 letters
arrangements = math.factorial(5) // (math.factorial(2) * math.factorial(3))
print(arrangements)"""

_BANANA_CLOSE = (
    "From the result, we can see that there are 10 unique arrangements of the "
    "5 remaining letters after fixing the first letter B."
    "\n"
    r"Final Answer: \(10\)"
)

ARRANGEMENT_CASE = ReplayCase(
    name="letter-arrangements",
    question=_BANANA_Q,
    gold_answer="50",
    final_answer="10",
    chain_length=3,
    accepted=False,
    spliced_stderr=None,
    observations=("120", "60", "10"),
    mock_rules=(
        MockRule(
            match=_output_key("120"),
            reply=f"\nSub Question: {_BANANA_SUBQ_1}\n</solution>",
        ),
        MockRule(
            match=_output_key("60"),
            reply=f"\nSub Question: {_BANANA_SUBQ_2}\n</solution>",
        ),
        MockRule(
            match=_output_key("10"),
            reply=f"\n{_BANANA_CLOSE}\n</solution>",
        ),
        MockRule(
            match="rearranged such that the new word does not begin",
            reply=_step_reply(_BANANA_ANALYSIS_1, _BANANA_CODE_1),
        ),
        MockRule(
            match="how many of these rearrangements do not start with the letter B",
            reply=_step_reply(_BANANA_ANALYSIS_2, _BANANA_CODE_2),
        ),
        MockRule(
            match="If there are 60 ways",
            reply=_step_reply(_BANANA_ANALYSIS_3, _BANANA_CODE_3),
        ),
    ),
    exec_rules=(
        ScriptedResult(
            match="factorial(6) // factorial(3)",
            result=ExecutionResult(status=ExecStatus.OK, stdout="120\n", wall_time=0.01),
        ),
        ScriptedResult(
            match="factorial(n) // (factorial(n_A)",
            result=ExecutionResult(status=ExecStatus.OK, stdout="60\n", wall_time=0.01),
        ),
        ScriptedResult(
            match="math.factorial(5)",
            result=ExecutionResult(status=ExecStatus.OK, stdout="10\n", wall_time=0.01),
        ),
    ),
)

ALL_CASES = (QUADRATIC_CASE, INEQUALITY_CASE, ARRANGEMENT_CASE)


# -- seed-construction fixture: a three-step arithmetic walk -------------------

SEED_GOLD = "52"

SEED_Q1 = (
    "Start with 20. First halve it, then add 3 to the result, then multiply "
    "the result by 4. What is the final value?"
)
SEED_Q2 = (
    "Start with 10. First add 3, then multiply the result by 4. What is the "
    "final value?"
)
SEED_Q3 = "Start with 13. Multiply it by 4. What is the final value?"


def _ok(stdout: str) -> ExecutionResult:
    return ExecutionResult(status=ExecStatus.OK, stdout=stdout)


def seed_trajectory() -> Trajectory:
    return Trajectory(
        question=SEED_Q1,
        steps=(
            DerivationStep("Halve 20 first.", "print(20 // 2)", _ok("10\n")),
            DerivationStep("Add 3 to 10.", "print(10 + 3)", _ok("13\n")),
            DerivationStep("Multiply 13 by 4.", "print(13 * 4)", _ok("52\n")),
        ),
        answer=SEED_GOLD,
    )


def _block(analysis: str, code: str, output: str, tail: str) -> str:
    return (
        f"<solution>\n{analysis}\n\n<code>\n{code}\n</code>\n\n"
        f"<output>\n{output}\n</output>\n\n{tail}\n</solution>"
    )


_SEED_SAMPLE_Q2 = (
    _block("Add 3 to 10.", "print(10 + 3)", "13", f"Sub Question: {SEED_Q3}")
    + "\n\n"
    + _block("Multiply 13 by 4.", "print(13 * 4)", "52", r"Final Answer: \(52\)")
)

_SEED_SAMPLE_Q3 = _block(
    "Multiply 13 by 4.", "print(13 * 4)", "52", r"Final Answer: \(52\)"
)


def seed_annotator_rules() -> tuple[MockRule, ...]:
    return (
        MockRule(match="Start with 20.", reply=SEED_Q2),
        MockRule(match="Start with 10.", reply=SEED_Q3),
    )


def seed_verifier_rules(answer_tail: str = r"Final Answer: \(52\)") -> tuple[MockRule, ...]:
    sample_q2 = _SEED_SAMPLE_Q2
    sample_q3 = _SEED_SAMPLE_Q3
    if answer_tail != r"Final Answer: \(52\)":
        sample_q2 = (
            _block("Add 3 to 10.", "print(10 + 3)", "13", f"Sub Question: {SEED_Q3}")
            + "\n\n"
            + _block("Multiply 13 by 4.", "print(13 * 4)", "52", answer_tail)
        )
        sample_q3 = _block("Multiply 13 by 4.", "print(13 * 4)", "52", answer_tail)
    return (
        MockRule(match="<question>\nStart with 10.", reply=sample_q2),
        MockRule(match="<question>\nStart with 13.", reply=sample_q3),
    )


def seed_hub(verifier_rules: tuple[MockRule, ...] | None = None, seed: int = 0) -> BackendHub:
    return BackendHub(
        {
            BackendRole.ANNOTATOR: MockBackend(seed_annotator_rules(), seed=seed),
            BackendRole.VERIFIER: MockBackend(
                seed_verifier_rules() if verifier_rules is None else verifier_rules,
                seed=seed,
            ),
        }
    )


def failing_verifier_hub(seed: int = 0) -> BackendHub:
    """Verifier whose samples always land on the wrong answer."""
    return BackendHub(
        {
            BackendRole.ANNOTATOR: MockBackend(seed_annotator_rules(), seed=seed),
            BackendRole.VERIFIER: MockBackend(
                seed_verifier_rules(answer_tail=r"Final Answer: \(99\)"), seed=seed
            ),
        }
    )


# -- programmatic fakes for bulk termination runs ------------------------------
#
# Question texts carry "[left N]" and "[goal G]" markers; the annotator
# decrements the counter, the verifier answers with exactly N blocks.
# Every accepted sample is therefore one step shorter than the queued
# trajectory, which is the property the walk's termination rests on.


def marked_question(label: str, left: int, goal: str) -> str:
    return f"Problem {label}: finish the remaining work. [left {int(left)}] [goal {goal}]"


def _read_marker(prompt: str, name: str) -> str:
    at = prompt.rfind(f"[{name} ")
    if at == -1:
        raise AssertionError(f"prompt lacks a {name} marker")
    end = prompt.index("]", at)
    return prompt[at + len(name) + 2 : end]


def _response(text: str, prompt: str) -> CompletionResponse:
    return CompletionResponse(
        text=text,
        prompt_tokens=approx_token_count(prompt),
        completion_tokens=approx_token_count(text),
    )


class CountdownAnnotator(Backend):
    def _complete_variant(self, request: CompletionRequest, variant: int) -> CompletionResponse:
        left = int(_read_marker(request.prompt, "left"))
        goal = _read_marker(request.prompt, "goal")
        label = _read_marker(request.prompt, "label")
        reduced = marked_question(f"{label}r", left - 1, goal) + f" [label {label}r]"
        return _response(reduced, request.prompt)


class CountdownVerifier(Backend):
    def _complete_variant(self, request: CompletionRequest, variant: int) -> CompletionResponse:
        left = int(_read_marker(request.prompt, "left"))
        goal = _read_marker(request.prompt, "goal")
        blocks = []
        for i in range(max(left - 1, 0)):
            blocks.append(
                _block(
                    f"Work item {i + 1} of {left}.",
                    f"print({i + 1})",
                    str(i + 1),
                    f"Sub Question: continue. [left {left - 1 - i}] [goal {goal}]",
                )
            )
        blocks.append(
            _block(
                "Close it out.",
                "print('done')",
                "done",
                rf"Final Answer: \({goal}\)",
            )
        )
        return _response("\n\n".join(blocks), request.prompt)


def countdown_hub() -> BackendHub:
    return BackendHub(
        {
            BackendRole.ANNOTATOR: CountdownAnnotator(),
            BackendRole.VERIFIER: CountdownVerifier(),
        }
    )


def countdown_trajectory(label: str, length: int, goal: str) -> Trajectory:
    question = marked_question(label, length, goal) + f" [label {label}]"
    steps = tuple(
        DerivationStep(
            f"Step {i + 1} of {label}.",
            f"print({i + 1})",
            _ok(f"{i + 1}\n"),
        )
        for i in range(length)
    )
    return Trajectory(question=question, steps=steps, answer=goal)
