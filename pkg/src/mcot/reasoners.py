"""Solving loops: memoryless step-reduction and full-history derivation.

Both loops drive the same two-phase step: generate until the code
section closes, execute the code, splice the observation back in, and
resume generation to get the step's closing line.  They differ only in
what the prompt carries.  The step-reduction loop prompts with the
current question alone, so context never accumulates; the full-history
loop concatenates the question with every prior step and observation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .backend import (
    BackendConfigError,
    BackendError,
    BackendHub,
    BackendRole,
    CompletionRequest,
)
from .chain import (
    MAX_CHAIN_STEPS,
    ChainEntry,
    ChainError,
    ChainStatus,
    DerivationStep,
    ExecStatus,
    ExecutionResult,
    MarkovChain,
    State,
    Trajectory,
    Transition,
    TransitionKind,
    observation_text,
    step_to_record,
    trajectory_from_record,
)
from .executor import HARNESS_PREFIX, Executor, ExecutorError
from .prompt_templates import solver_full_template, solver_step_template
from .tagformat import (
    CODE_CLOSE,
    CODE_OPEN,
    SOLUTION_CLOSE,
    SOLUTION_OPEN,
    AnswerFormatError,
    RenderError,
    SolutionBlock,
    TagParseError,
    TerminalKind,
    extract_final_answer,
    parse_solution,
    render_block,
    render_partial,
)

logger = logging.getLogger(__name__)

MCOT_STRATEGY = "mcot"
MSR_STRATEGY = "msr"

# Generation stops: phase one ends when the code section closes (or the
# model finishes the block without code); phase two ends with the block.
PHASE_ONE_STOPS = (CODE_CLOSE, SOLUTION_CLOSE)
PHASE_TWO_STOPS = (SOLUTION_CLOSE,)

# Bytes of key/value cache one context token costs on a generic 7B-class
# decoder at 16-bit precision: 2 tensors x 32 layers x 32 heads x 128 dims
# x 2 bytes.
DEFAULT_CACHE_BYTES_PER_TOKEN = 2 * 32 * 32 * 128 * 2

# A reduction that repeats the current question this many times in a row
# is treated as a stuck loop and stopped early.
SELF_LOOP_LIMIT = 2


class StopReason(str, Enum):
    FINAL = "final"
    MAX_STEPS = "max_steps"
    BACKEND_ERROR = "backend_error"
    PARSE_ERROR = "parse_error"


@dataclass(frozen=True, slots=True)
class StepTelemetry:
    step_index: int
    prompt_tokens: int
    completion_tokens: int
    decode_time: float
    exec_time: float
    modeled_cache_bytes: int


@dataclass(frozen=True, slots=True)
class SolveConfig:
    max_steps: int = MAX_CHAIN_STEPS
    max_new_tokens: int = 1024
    temperature: float = 0.0
    step_template: str | None = None
    full_template: str | None = None
    cache_bytes_per_token: int = DEFAULT_CACHE_BYTES_PER_TOKEN

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True, slots=True)
class RunRecord:
    """Everything one solving run produced, including per-step telemetry."""

    strategy: str
    question: str
    chain: MarkovChain | Trajectory | None
    telemetry: tuple[StepTelemetry, ...]
    stop_reason: StopReason
    final_answer: str | None = None
    failure_text: str | None = None

    @property
    def solved(self) -> bool:
        return self.stop_reason is StopReason.FINAL

    @property
    def peak_cache_bytes(self) -> int:
        return max((t.modeled_cache_bytes for t in self.telemetry), default=0)


def build_prompt_mcot(
    state: State,
    partial: SolutionBlock | None = None,
    template: str | None = None,
) -> str:
    """Prompt for one memoryless step.

    A pure function of the template, the state's question, and the
    in-flight partial block; no other history can reach it.  With a
    partial carrying an output section, the prompt ends right after the
    closing output tag so generation resumes from there.
    """
    header = template if template is not None else solver_step_template()
    base = (
        f"{header.rstrip()}\n\n"
        f"<question>\n{state.question}\n</question>\n\n"
    )
    if partial is None:
        return base + SOLUTION_OPEN + "\n"
    return base + render_partial(partial)


def build_prompt_msr(
    question: str,
    history: Sequence[SolutionBlock] = (),
    partial: SolutionBlock | None = None,
    template: str | None = None,
) -> str:
    """Prompt carrying the question plus every prior step and observation."""
    header = template if template is not None else solver_full_template()
    parts = [
        f"{header.rstrip()}\n\n",
        f"<question>\n{question}\n</question>\n\n",
    ]
    for block in history:
        parts.append(render_block(block) + "\n\n")
    parts.append(SOLUTION_OPEN + "\n" if partial is None else render_partial(partial))
    return "".join(parts)


class _StepFault(Exception):
    """One step could not produce a well-formed block."""

    def __init__(self, reason: StopReason, detail: str) -> None:
        self.reason = reason
        self.detail = detail
        super().__init__(detail)


@dataclass(frozen=True, slots=True)
class _StepOutcome:
    block: SolutionBlock
    observation: ExecutionResult | None
    prompt_tokens: int
    completion_tokens: int
    decode_time: float


def _safe_execute(executor: Executor, code: str) -> ExecutionResult:
    try:
        return executor.execute(code)
    except ExecutorError as exc:
        logger.warning("executor failed, continuing with harness error: %s", exc)
        return ExecutionResult(status=ExecStatus.ERROR, stderr=f"{HARNESS_PREFIX} {exc}")


def _run_step(prompt_fn, hub: BackendHub, role: BackendRole, executor: Executor,
              config: SolveConfig) -> _StepOutcome:
    """Drive the two generation phases of a single step."""
    request = CompletionRequest(
        prompt=prompt_fn(None),
        max_new_tokens=config.max_new_tokens,
        temperature=config.temperature,
        stop_sequences=PHASE_ONE_STOPS,
    )
    try:
        first = hub.complete(request, role)
    except BackendConfigError:
        raise
    except BackendError as exc:
        raise _StepFault(StopReason.BACKEND_ERROR, str(exc)) from exc

    code_at = first.text.find(CODE_OPEN)
    if code_at == -1:
        raw = f"{SOLUTION_OPEN}\n{first.text.rstrip()}\n{SOLUTION_CLOSE}"
        try:
            block = parse_solution(raw)
        except TagParseError as exc:
            raise _StepFault(StopReason.PARSE_ERROR, f"{exc}\n---\n{first.text}") from exc
        return _StepOutcome(
            block=block,
            observation=None,
            prompt_tokens=first.prompt_tokens,
            completion_tokens=first.completion_tokens,
            decode_time=first.latency,
        )

    analysis = first.text[:code_at].strip()
    code = first.text[code_at + len(CODE_OPEN):].strip("\n")
    observation = _safe_execute(executor, code)
    partial = SolutionBlock(
        analysis=analysis,
        code=code,
        output=observation_text(observation),
    )
    try:
        second_prompt = prompt_fn(partial)
    except RenderError as exc:
        raise _StepFault(StopReason.PARSE_ERROR, f"{exc}\n---\n{first.text}") from exc
    request = CompletionRequest(
        prompt=second_prompt,
        max_new_tokens=config.max_new_tokens,
        temperature=config.temperature,
        stop_sequences=PHASE_TWO_STOPS,
    )
    try:
        second = hub.complete(request, role)
    except BackendConfigError:
        raise
    except BackendError as exc:
        raise _StepFault(StopReason.BACKEND_ERROR, str(exc)) from exc

    raw = render_partial(partial) + second.text.rstrip() + "\n" + SOLUTION_CLOSE
    try:
        block = parse_solution(raw)
    except TagParseError as exc:
        raise _StepFault(StopReason.PARSE_ERROR, f"{exc}\n---\n{raw}") from exc
    return _StepOutcome(
        block=block,
        observation=observation,
        prompt_tokens=max(first.prompt_tokens, second.prompt_tokens),
        completion_tokens=first.completion_tokens + second.completion_tokens,
        decode_time=first.latency + second.latency,
    )


def _telemetry_for(outcome: _StepOutcome, index: int, config: SolveConfig) -> StepTelemetry:
    exec_time = outcome.observation.wall_time if outcome.observation is not None else 0.0
    context = outcome.prompt_tokens + outcome.completion_tokens
    return StepTelemetry(
        step_index=index,
        prompt_tokens=outcome.prompt_tokens,
        completion_tokens=outcome.completion_tokens,
        decode_time=outcome.decode_time,
        exec_time=exec_time,
        modeled_cache_bytes=config.cache_bytes_per_token * context,
    )


def _step_from_block(block: SolutionBlock, observation: ExecutionResult | None) -> DerivationStep:
    return DerivationStep(
        analysis=block.analysis,
        code=block.code or "",
        observation=observation,
    )


def solve_mcot(
    question: str,
    hub: BackendHub,
    executor: Executor,
    config: SolveConfig = SolveConfig(),
    role: BackendRole = BackendRole.SOLVER,
) -> RunRecord:
    """Solve by repeated reduction; context resets at every step."""
    state = State(question=question, index=1)
    entries: list[ChainEntry] = []
    telemetry: list[StepTelemetry] = []
    template = config.step_template
    self_loops = 0

    while True:
        try:
            outcome = _run_step(
                lambda partial: build_prompt_mcot(state, partial, template),
                hub, role, executor, config,
            )
            transition = _mcot_transition(outcome.block)
        except _StepFault as fault:
            return RunRecord(
                strategy=MCOT_STRATEGY,
                question=question,
                chain=MarkovChain(tuple(entries), ChainStatus.FAILED),
                telemetry=tuple(telemetry),
                stop_reason=fault.reason,
                failure_text=fault.detail,
            )

        entries.append(ChainEntry(state, _step_from_block(outcome.block, outcome.observation), transition))
        telemetry.append(_telemetry_for(outcome, state.index, config))

        if transition.kind is TransitionKind.FINAL:
            return RunRecord(
                strategy=MCOT_STRATEGY,
                question=question,
                chain=MarkovChain(tuple(entries), ChainStatus.SOLVED),
                telemetry=tuple(telemetry),
                stop_reason=StopReason.FINAL,
                final_answer=transition.answer,
            )

        assert transition.next_question is not None
        if transition.next_question == state.question:
            self_loops += 1
        else:
            self_loops = 0
        if state.index >= config.max_steps or self_loops >= SELF_LOOP_LIMIT:
            return RunRecord(
                strategy=MCOT_STRATEGY,
                question=question,
                chain=MarkovChain(tuple(entries), ChainStatus.EXHAUSTED),
                telemetry=tuple(telemetry),
                stop_reason=StopReason.MAX_STEPS,
            )
        state = State(question=transition.next_question, index=state.index + 1)


def _mcot_transition(block: SolutionBlock) -> Transition:
    terminal = block.terminal
    if terminal is None:
        raise _StepFault(StopReason.PARSE_ERROR, f"step ended without a terminal line\n---\n{block.analysis}")
    try:
        if terminal.kind is TerminalKind.SUB_QUESTION:
            return Transition.reduce(terminal.text)
        return Transition.final(extract_final_answer(terminal.text))
    except (ChainError, AnswerFormatError) as exc:
        raise _StepFault(StopReason.PARSE_ERROR, str(exc)) from exc


def solve_msr(
    question: str,
    hub: BackendHub,
    executor: Executor,
    config: SolveConfig = SolveConfig(),
    role: BackendRole = BackendRole.SOLVER,
) -> RunRecord:
    """Solve with the full derivation history in every prompt.

    Steps accumulate until the model commits to a final answer; there
    are no reductions, and a stray Sub Question line is kept as prose
    history rather than a handoff.
    """
    history: list[SolutionBlock] = []
    steps: list[DerivationStep] = []
    telemetry: list[StepTelemetry] = []
    template = config.full_template

    for index in range(1, config.max_steps + 1):
        try:
            outcome = _run_step(
                lambda partial: build_prompt_msr(question, history, partial, template),
                hub, role, executor, config,
            )
        except _StepFault as fault:
            return RunRecord(
                strategy=MSR_STRATEGY,
                question=question,
                chain=Trajectory(question, tuple(steps), "") if steps else None,
                telemetry=tuple(telemetry),
                stop_reason=fault.reason,
                failure_text=fault.detail,
            )

        block = outcome.block
        steps.append(_step_from_block(block, outcome.observation))
        telemetry.append(_telemetry_for(outcome, index, config))

        if block.terminal is not None and block.terminal.kind is TerminalKind.FINAL_ANSWER:
            try:
                answer = extract_final_answer(block.terminal.text)
            except AnswerFormatError as exc:
                return RunRecord(
                    strategy=MSR_STRATEGY,
                    question=question,
                    chain=Trajectory(question, tuple(steps), ""),
                    telemetry=tuple(telemetry),
                    stop_reason=StopReason.PARSE_ERROR,
                    failure_text=str(exc),
                )
            return RunRecord(
                strategy=MSR_STRATEGY,
                question=question,
                chain=Trajectory(question, tuple(steps), answer),
                telemetry=tuple(telemetry),
                stop_reason=StopReason.FINAL,
                final_answer=answer,
            )
        # History keeps the step but never a handoff line.
        history.append(SolutionBlock(block.analysis, block.code, block.output, None))

    return RunRecord(
        strategy=MSR_STRATEGY,
        question=question,
        chain=Trajectory(question, tuple(steps), ""),
        telemetry=tuple(telemetry),
        stop_reason=StopReason.MAX_STEPS,
    )


def solve(
    strategy: str,
    question: str,
    hub: BackendHub,
    executor: Executor,
    config: SolveConfig = SolveConfig(),
) -> RunRecord:
    if strategy == MCOT_STRATEGY:
        return solve_mcot(question, hub, executor, config)
    if strategy == MSR_STRATEGY:
        return solve_msr(question, hub, executor, config)
    raise ValueError(f"unknown strategy {strategy!r}")


# JSONL projection of run records, consumed by the bench and the CLI.


def telemetry_to_record(t: StepTelemetry) -> dict:
    return {
        "step_index": t.step_index,
        "prompt_tokens": t.prompt_tokens,
        "completion_tokens": t.completion_tokens,
        "decode_time": t.decode_time,
        "exec_time": t.exec_time,
        "modeled_cache_bytes": t.modeled_cache_bytes,
    }


def telemetry_from_record(rec: dict) -> StepTelemetry:
    return StepTelemetry(
        step_index=int(rec["step_index"]),
        prompt_tokens=int(rec["prompt_tokens"]),
        completion_tokens=int(rec["completion_tokens"]),
        decode_time=float(rec["decode_time"]),
        exec_time=float(rec["exec_time"]),
        modeled_cache_bytes=int(rec["modeled_cache_bytes"]),
    )


def run_record_to_record(record: RunRecord) -> dict:
    chain_obj: dict | None = None
    if isinstance(record.chain, MarkovChain):
        chain_obj = {
            "kind": "markov",
            "status": record.chain.status.value,
            "entries": [
                {
                    "question": e.state.question,
                    "index": e.state.index,
                    **step_to_record(e.step),
                    "outcome_kind": e.transition.kind.value,
                    "outcome_text": (
                        e.transition.next_question
                        if e.transition.kind is TransitionKind.REDUCE
                        else e.transition.answer
                    ),
                }
                for e in record.chain.entries
            ],
        }
    elif isinstance(record.chain, Trajectory):
        chain_obj = {
            "kind": "trajectory",
            "question": record.chain.question,
            "steps": [step_to_record(s) for s in record.chain.steps],
            "answer": record.chain.answer,
        }
    return {
        "strategy": record.strategy,
        "question": record.question,
        "stop_reason": record.stop_reason.value,
        "final_answer": record.final_answer,
        "failure_text": record.failure_text,
        "chain": chain_obj,
        "telemetry": [telemetry_to_record(t) for t in record.telemetry],
    }


def run_record_from_record(rec: dict) -> RunRecord:
    telemetry = tuple(telemetry_from_record(t) for t in rec.get("telemetry", []))
    chain: MarkovChain | Trajectory | None = None
    chain_obj = rec.get("chain")
    if isinstance(chain_obj, dict) and chain_obj.get("kind") == "markov":
        entries = []
        for e in chain_obj.get("entries", []):
            if e["outcome_kind"] == TransitionKind.REDUCE.value:
                transition = Transition.reduce(e["outcome_text"])
            else:
                transition = Transition.final(e["outcome_text"])
            observation = None
            if e.get("code", "").strip() or e.get("output"):
                observation = ExecutionResult(ExecStatus.OK, stdout=e.get("output", ""))
            entries.append(
                ChainEntry(
                    State(e["question"], int(e["index"])),
                    DerivationStep(e.get("analysis", ""), e.get("code", ""), observation),
                    transition,
                )
            )
        chain = MarkovChain(tuple(entries), ChainStatus(chain_obj["status"]))
    elif isinstance(chain_obj, dict) and chain_obj.get("kind") == "trajectory":
        chain = trajectory_from_record(chain_obj)
    return RunRecord(
        strategy=rec["strategy"],
        question=rec["question"],
        chain=chain,
        telemetry=telemetry,
        stop_reason=StopReason(rec["stop_reason"]),
        final_answer=rec.get("final_answer"),
        failure_text=rec.get("failure_text"),
    )
