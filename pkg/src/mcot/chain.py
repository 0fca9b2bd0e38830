"""Core chain types: states, derivation steps, transitions, and chains.

A solving run is a sequence of (state, step, transition) entries.  Each
state carries a self-contained question; the step is the worked
derivation for that question alone; the transition either reduces the
problem to a new question or commits to a final answer.  Because every
entry stands on its own, a chain decomposes losslessly into independent
triplets and can be reassembled from them.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

MAX_CHAIN_STEPS = 8


class ChainError(ValueError):
    """Raised when chain data violates a structural contract."""


class ChainStructureError(ChainError):
    """Structural violation tied to a specific entry index."""

    def __init__(self, index: int, reason: str) -> None:
        self.index = index
        self.reason = reason
        super().__init__(f"entry {index}: {reason}")


class ChainStatus(str, Enum):
    SOLVED = "solved"
    EXHAUSTED = "exhausted"
    FAILED = "failed"


class ExecStatus(str, Enum):
    OK = "ok"
    ERROR = "error"
    TIMEOUT = "timeout"


class TransitionKind(str, Enum):
    REDUCE = "reduce"
    FINAL = "final"


@dataclass(frozen=True, slots=True)
class State:
    """A self-contained question at a given position in a chain."""

    question: str
    index: int = 1

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ChainError("state question must be non-empty")
        if self.index < 1:
            raise ChainError(f"state index must be >= 1, got {self.index}")


@dataclass(frozen=True, slots=True)
class ExecutionResult:
    """Outcome of running one code snippet."""

    status: ExecStatus
    stdout: str = ""
    stderr: str = ""
    wall_time: float = 0.0

    def __post_init__(self) -> None:
        if self.wall_time < 0:
            raise ChainError("wall_time must be >= 0")


@dataclass(frozen=True, slots=True)
class DerivationStep:
    """One worked step: analysis text, optional code, optional observation."""

    analysis: str
    code: str = ""
    observation: ExecutionResult | None = None


@dataclass(frozen=True, slots=True)
class Transition:
    """Exit from a state: either a reduced question or a final answer."""

    kind: TransitionKind
    next_question: str | None = None
    answer: str | None = None

    def __post_init__(self) -> None:
        if self.kind is TransitionKind.REDUCE:
            if not self.next_question or self.answer is not None:
                raise ChainError("reduce transition carries exactly a next question")
        else:
            if self.answer is None or self.next_question is not None:
                raise ChainError("final transition carries exactly an answer")

    @classmethod
    def reduce(cls, next_question: str) -> "Transition":
        return cls(TransitionKind.REDUCE, next_question=next_question)

    @classmethod
    def final(cls, answer: str) -> "Transition":
        return cls(TransitionKind.FINAL, answer=answer)


@dataclass(frozen=True, slots=True)
class ChainEntry:
    state: State
    step: DerivationStep
    transition: Transition


@dataclass(frozen=True, slots=True)
class MarkovChain:
    """An ordered run of entries plus its terminal status.

    A chain may be empty only when status is ``failed`` (the run broke
    before completing a single entry).
    """

    entries: tuple[ChainEntry, ...]
    status: ChainStatus


@dataclass(frozen=True, slots=True)
class Trajectory:
    """A conventional multi-step solution: question, steps, final answer."""

    question: str
    steps: tuple[DerivationStep, ...]
    answer: str

    def __post_init__(self) -> None:
        if not self.steps:
            raise ChainError("trajectory must contain at least one step")

    @property
    def length(self) -> int:
        return len(self.steps)


@dataclass(frozen=True, slots=True)
class Triplet:
    """A single self-contained training unit: question, step, outcome."""

    question: str
    step: DerivationStep
    outcome: Transition


@dataclass(frozen=True, slots=True)
class Violation:
    """One validate_chain finding.  index is -1 for chain-level issues."""

    index: int
    reason: str


def validate_chain(chain: MarkovChain, max_steps: int = MAX_CHAIN_STEPS) -> list[Violation]:
    """Check every structural invariant; returns findings instead of raising."""
    violations: list[Violation] = []
    entries = chain.entries
    if not entries:
        if chain.status is not ChainStatus.FAILED:
            violations.append(Violation(-1, "chain has no entries"))
        return violations
    if len(entries) > max_steps:
        violations.append(Violation(-1, f"chain length {len(entries)} exceeds cap {max_steps}"))
    last = len(entries) - 1
    for i, entry in enumerate(entries):
        if entry.state.index != i + 1:
            violations.append(Violation(i, f"state index {entry.state.index} should be {i + 1}"))
        if entry.step.code.strip() and entry.step.observation is None:
            violations.append(Violation(i, "step has code but no observation"))
        if i < last:
            if entry.transition.kind is not TransitionKind.REDUCE:
                violations.append(Violation(i, "non-last transition must be a reduction"))
            elif entry.transition.next_question != entries[i + 1].state.question:
                violations.append(Violation(i + 1, "state question does not match preceding reduction"))
    final_last = entries[last].transition.kind is TransitionKind.FINAL
    if chain.status is ChainStatus.SOLVED and not final_last:
        violations.append(Violation(last, "solved chain must end with a final transition"))
    if chain.status is not ChainStatus.SOLVED and final_last:
        violations.append(Violation(last, "final transition on a chain not marked solved"))
    return violations


def decompose_chain(chain: MarkovChain, max_steps: int = MAX_CHAIN_STEPS) -> list[Triplet]:
    """Split a valid chain into independent triplets, one per entry."""
    violations = validate_chain(chain, max_steps=max_steps)
    if violations:
        first = violations[0]
        raise ChainStructureError(first.index, first.reason)
    if not chain.entries:
        raise ChainError("cannot decompose an empty chain")
    return [Triplet(e.state.question, e.step, e.transition) for e in chain.entries]


def reassemble_chain(
    triplets: Sequence[Triplet],
    status: ChainStatus | None = None,
    max_steps: int = MAX_CHAIN_STEPS,
) -> MarkovChain:
    """Rebuild a chain from ordered triplets.

    Status is inferred when omitted: a final outcome in last position
    means solved, otherwise exhausted.  Pass status explicitly to mark a
    chain failed.
    """
    if not triplets:
        raise ChainError("cannot reassemble an empty triplet list")
    entries: list[ChainEntry] = []
    last = len(triplets) - 1
    for i, t in enumerate(triplets):
        if i < last:
            if t.outcome.kind is not TransitionKind.REDUCE:
                raise ChainStructureError(i, "non-last outcome must be a reduction")
            if t.outcome.next_question != triplets[i + 1].question:
                raise ChainStructureError(i + 1, "question does not match preceding reduction")
        entries.append(ChainEntry(State(t.question, i + 1), t.step, t.outcome))
    final_last = triplets[last].outcome.kind is TransitionKind.FINAL
    if status is None:
        status = ChainStatus.SOLVED if final_last else ChainStatus.EXHAUSTED
    elif (status is ChainStatus.SOLVED) != final_last:
        raise ChainStructureError(last, f"status {status.value} conflicts with last outcome")
    chain = MarkovChain(tuple(entries), status)
    violations = validate_chain(chain, max_steps=max_steps)
    if violations:
        first = violations[0]
        raise ChainStructureError(first.index, first.reason)
    return chain


def observation_text(result: ExecutionResult | None) -> str:
    """The text a step's observation contributes to prompts and records.

    Successful runs show stdout; failing runs show stderr verbatim so the
    error string stays visible to the next step.  A timeout with silent
    streams gets a fixed marker.
    """
    if result is None:
        return ""
    if result.status is ExecStatus.OK:
        return result.stdout.rstrip("\n")
    text = result.stderr.rstrip("\n")
    if result.status is ExecStatus.TIMEOUT and not text:
        return "TimeoutError: execution timed out"
    return text


# On-disk records.  Trajectories and triplets travel as JSON objects with
# the field layout below; these are projections (observation status and
# timing are not preserved), which is all downstream consumers need.


def step_to_record(step: DerivationStep) -> dict:
    return {
        "analysis": step.analysis,
        "code": step.code,
        "output": observation_text(step.observation),
    }


def step_from_record(rec: dict) -> DerivationStep:
    analysis = rec.get("analysis")
    if not isinstance(analysis, str):
        raise ChainError("step record missing string 'analysis'")
    code = rec.get("code", "")
    output = rec.get("output", "")
    if not isinstance(code, str) or not isinstance(output, str):
        raise ChainError("step record 'code' and 'output' must be strings")
    observation = None
    if code.strip() or output:
        observation = ExecutionResult(ExecStatus.OK, stdout=output)
    return DerivationStep(analysis=analysis, code=code, observation=observation)


def trajectory_to_record(trajectory: Trajectory) -> dict:
    return {
        "question": trajectory.question,
        "steps": [step_to_record(s) for s in trajectory.steps],
        "answer": trajectory.answer,
    }


def trajectory_from_record(rec: dict) -> Trajectory:
    question = rec.get("question")
    answer = rec.get("answer")
    steps = rec.get("steps")
    if not isinstance(question, str) or not question.strip():
        raise ChainError("trajectory record missing non-empty 'question'")
    if not isinstance(answer, str):
        raise ChainError("trajectory record missing string 'answer'")
    if not isinstance(steps, list) or not steps:
        raise ChainError("trajectory record missing non-empty 'steps'")
    parsed = tuple(step_from_record(s) for s in steps)
    return Trajectory(question=question, steps=parsed, answer=answer)


def triplet_to_record(triplet: Triplet) -> dict:
    outcome = triplet.outcome
    text = outcome.next_question if outcome.kind is TransitionKind.REDUCE else outcome.answer
    return {
        "question": triplet.question,
        "analysis": triplet.step.analysis,
        "code": triplet.step.code,
        "output": observation_text(triplet.step.observation),
        "outcome_kind": outcome.kind.value,
        "outcome_text": text,
    }


def triplet_from_record(rec: dict) -> Triplet:
    question = rec.get("question")
    if not isinstance(question, str) or not question.strip():
        raise ChainError("triplet record missing non-empty 'question'")
    kind = rec.get("outcome_kind")
    text = rec.get("outcome_text")
    if kind not in (TransitionKind.REDUCE.value, TransitionKind.FINAL.value):
        raise ChainError(f"triplet record has unknown outcome_kind {kind!r}")
    if not isinstance(text, str):
        raise ChainError("triplet record missing string 'outcome_text'")
    step = step_from_record(rec)
    if kind == TransitionKind.REDUCE.value:
        outcome = Transition.reduce(text)
    else:
        outcome = Transition.final(text)
    return Triplet(question=question, step=step, outcome=outcome)


def require_step_observation(triplets: Iterable[Triplet]) -> None:
    """Raise if any triplet pairs non-empty code with a missing observation."""
    for i, t in enumerate(triplets):
        if t.step.code.strip() and t.step.observation is None:
            raise ChainStructureError(i, "step has code but no observation")
