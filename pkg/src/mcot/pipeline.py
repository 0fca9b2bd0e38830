"""Triplet dataset construction.

Seed building walks each multi-step trajectory from the front: an
annotator model restates the remainder as one self-contained question,
a verifier model samples full solutions of that question, and the
handoff is kept only when some sample reproduces the gold answer (the
independence test).  The consumed step becomes a reduction triplet and
the passing sample is requeued as a shorter trajectory, so every round
strictly shrinks the longest queued trajectory and the walk terminates.
Self-distillation solves fresh question/answer pairs with the
step-reduction engine and keeps answer-verified chains.  Both feed a
dedup filter keyed on the content hash of (question, code, outcome).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

from .backend import (
    BackendHub,
    BackendRole,
    CompletionRequest,
    ProtocolError,
    TransportError,
    VERIFIER_DEFAULT_SAMPLES,
    VERIFIER_DEFAULT_TEMPERATURE,
)
from .chain import (
    DerivationStep,
    ExecStatus,
    ExecutionResult,
    Trajectory,
    Transition,
    Triplet,
    decompose_chain,
    observation_text,
    trajectory_from_record,
    trajectory_to_record,
    triplet_from_record,
    triplet_to_record,
)
from .executor import Executor
from .prompt_templates import annotator_template
from .reasoners import SolveConfig, build_prompt_msr, solve_mcot
from .tagformat import (
    AnswerFormatError,
    RenderError,
    SOLUTION_OPEN,
    SolutionBlock,
    SUB_QUESTION_MARKER,
    TagParseError,
    TerminalKind,
    extract_final_answer,
    parse_document,
    render_block,
)
from .verifier import DEFAULT_TOLERANCE, equivalent

logger = logging.getLogger(__name__)

SOURCE_SEED = "seed"
SOURCE_SELF_DISTILL = "self_distill"

CHECKPOINT_VERSION = 1


class PipelineError(Exception):
    """Dataset construction failed outright."""


class PipelineInterrupted(PipelineError):
    """Construction aborted on a backend outage; resume from checkpoint."""

    def __init__(self, message: str, checkpoint_path: str | None) -> None:
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


@dataclass(frozen=True, slots=True)
class Provenance:
    origin_id: str
    iteration: int
    source: str
    gold_answer: str | None = None
    verified_answer: str | None = None


@dataclass(frozen=True, slots=True)
class CorpusEntry:
    triplet: Triplet
    provenance: Provenance


def dedup_key(triplet: Triplet) -> str:
    """Content hash; whitespace differences do not distinguish triplets."""
    outcome = triplet.outcome
    outcome_text = outcome.next_question if outcome.next_question is not None else outcome.answer
    parts = (
        " ".join(triplet.question.split()),
        " ".join(triplet.step.code.split()),
        outcome.kind.value,
        " ".join((outcome_text or "").split()),
    )
    payload = "\x1f".join(parts)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SeedCorpus:
    """Deduplicated triplets with per-triplet provenance."""

    entries: tuple[CorpusEntry, ...] = ()

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for entry in self.entries:
            key = dedup_key(entry.triplet)
            if key in seen:
                raise PipelineError(f"corpus contains duplicate triplet key {key[:12]}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def triplets(self) -> tuple[Triplet, ...]:
        return tuple(e.triplet for e in self.entries)


def _entry_rank(entry: CorpusEntry) -> tuple:
    source_rank = 0 if entry.provenance.source == SOURCE_SEED else 1
    return (
        source_rank,
        entry.provenance.origin_id,
        entry.provenance.iteration,
        json.dumps(triplet_to_record(entry.triplet), sort_keys=True),
    )


def filter_dedup(corpora: Sequence[SeedCorpus]) -> SeedCorpus:
    """Merge corpora, keeping one triplet per content key.

    The winner of a key collision is chosen by a total order (seed
    provenance first), so the result does not depend on input order,
    and filtering is idempotent.
    """
    by_key: dict[str, CorpusEntry] = {}
    for corpus in corpora:
        for entry in corpus.entries:
            key = dedup_key(entry.triplet)
            kept = by_key.get(key)
            if kept is None or _entry_rank(entry) < _entry_rank(kept):
                by_key[key] = entry
    ordered = sorted(by_key.items(), key=lambda kv: _entry_rank(kv[1]))
    return SeedCorpus(tuple(entry for _, entry in ordered))


@dataclass(frozen=True)
class PipelineConfig:
    verifier_samples: int = VERIFIER_DEFAULT_SAMPLES
    verifier_temperature: float = VERIFIER_DEFAULT_TEMPERATURE
    verifier_max_new_tokens: int = 2048
    annotator_max_new_tokens: int = 256
    tolerance: float = DEFAULT_TOLERANCE
    max_iterations: int = 16
    annotator_header: str | None = None
    verifier_header: str | None = None


@dataclass
class IterationStats:
    iteration: int
    processed: int = 0
    reduced: int = 0
    drained_finals: int = 0
    dropped_annotator: int = 0
    dropped_verifier: int = 0
    tail_dropped: int = 0


@dataclass
class BuildStats:
    iterations: int = 0
    finals: int = 0
    reduces: int = 0
    dropped_annotator: int = 0
    dropped_verifier: int = 0
    tail_dropped: int = 0
    duplicates_merged: int = 0
    per_iteration: list[IterationStats] = field(default_factory=list)

    def as_dict(self) -> dict:
        out = asdict(self)
        out["per_iteration"] = [asdict(row) for row in self.per_iteration]
        return out


@dataclass(frozen=True)
class BuildResult:
    corpus: SeedCorpus
    stats: BuildStats
    leftover: tuple[Trajectory, ...] = ()


@dataclass(frozen=True, slots=True)
class _Work:
    origin_id: str
    trajectory: Trajectory


def build_annotator_prompt(question: str, first_step: DerivationStep, header: str | None = None) -> str:
    """Prompt asking for the self-contained question that remains."""
    text = header if header is not None else annotator_template()
    block = SolutionBlock(
        analysis=first_step.analysis,
        code=first_step.code if first_step.code.strip() else None,
        output=_step_output(first_step),
    )
    return (
        f"{text.rstrip()}\n\n"
        f"<question>\n{question}\n</question>\n\n"
        f"{render_block(block)}\n\n"
        "Reduced question:"
    )


def _step_output(step: DerivationStep) -> str | None:
    if step.observation is None:
        return None
    return observation_text(step.observation)


def _clean_reduced_question(reply: str) -> str | None:
    for line in reply.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith(SUB_QUESTION_MARKER):
            line = line[len(SUB_QUESTION_MARKER):].strip()
        return line or None
    return None


@dataclass(frozen=True, slots=True)
class _Candidate:
    steps: tuple[DerivationStep, ...]
    answer: str


def _candidate_from_sample(text: str) -> _Candidate | None:
    """Parse one verifier sample into steps plus its final answer.

    The sampling prompt ends with an opening solution tag, so a
    continuation-style reply lacks its own opener; restore it before
    parsing.  Scripted replies that are already full documents pass
    through unchanged.
    """
    if not text.lstrip().startswith(SOLUTION_OPEN):
        text = f"{SOLUTION_OPEN}\n{text}"
    try:
        blocks = parse_document(text)
    except TagParseError:
        return None
    if not blocks:
        return None
    last = blocks[-1]
    if last.terminal is None or last.terminal.kind is not TerminalKind.FINAL_ANSWER:
        return None
    try:
        answer = extract_final_answer(last.terminal.text)
    except AnswerFormatError:
        return None
    steps: list[DerivationStep] = []
    for block in blocks:
        if block.has_code and block.output is None:
            return None
        observation = None
        if block.output is not None:
            observation = ExecutionResult(ExecStatus.OK, stdout=block.output)
        steps.append(DerivationStep(block.analysis, block.code or "", observation))
    return _Candidate(steps=tuple(steps), answer=answer)


class _SeedBuilder:
    def __init__(
        self,
        hub: BackendHub,
        config: PipelineConfig,
        checkpoint_path: str | None,
    ) -> None:
        self.hub = hub
        self.config = config
        self.checkpoint_path = checkpoint_path
        self.queue: list[_Work] = []
        self.by_key: dict[str, CorpusEntry] = {}
        self.stats = BuildStats()

    # -- corpus accumulation ------------------------------------------------

    def _emit(self, entry: CorpusEntry) -> None:
        key = dedup_key(entry.triplet)
        kept = self.by_key.get(key)
        if kept is None or _entry_rank(entry) < _entry_rank(kept):
            if kept is not None:
                self.stats.duplicates_merged += 1
            self.by_key[key] = entry
        else:
            self.stats.duplicates_merged += 1

    def _drain(self, row: IterationStats | None, iteration: int) -> None:
        remaining: list[_Work] = []
        for work in self.queue:
            if work.trajectory.length == 1:
                step = work.trajectory.steps[0]
                triplet = Triplet(
                    question=work.trajectory.question,
                    step=step,
                    outcome=Transition.final(work.trajectory.answer),
                )
                self._emit(
                    CorpusEntry(
                        triplet,
                        Provenance(
                            origin_id=work.origin_id,
                            iteration=iteration,
                            source=SOURCE_SEED,
                            gold_answer=work.trajectory.answer,
                            verified_answer=work.trajectory.answer,
                        ),
                    )
                )
                self.stats.finals += 1
                if row is not None:
                    row.drained_finals += 1
            else:
                remaining.append(work)
        self.queue = remaining

    # -- model calls --------------------------------------------------------

    def _annotate(self, work: _Work) -> str | None:
        try:
            prompt = build_annotator_prompt(
                work.trajectory.question,
                work.trajectory.steps[0],
                self.config.annotator_header,
            )
        except RenderError as exc:
            logger.warning("origin %s: step not renderable: %s", work.origin_id, exc)
            return None
        request = CompletionRequest(
            prompt=prompt,
            max_new_tokens=self.config.annotator_max_new_tokens,
            temperature=0.0,
        )
        try:
            response = self.hub.complete(request, BackendRole.ANNOTATOR)
        except TransportError as exc:
            raise PipelineInterrupted(
                f"annotator unreachable: {exc}", self.checkpoint_path
            ) from exc
        except ProtocolError as exc:
            logger.warning("origin %s: annotator reply unusable: %s", work.origin_id, exc)
            return None
        reduced = _clean_reduced_question(response.text)
        if reduced is None:
            logger.warning("origin %s: annotator returned no question", work.origin_id)
        return reduced

    def _verify(self, work: _Work, reduced_question: str) -> tuple[_Candidate | None, str | None]:
        """Best passing candidate and its answer, or (None, None)."""
        prompt = build_prompt_msr(reduced_question, template=self.config.verifier_header)
        request = CompletionRequest(
            prompt=prompt,
            max_new_tokens=self.config.verifier_max_new_tokens,
            temperature=self.config.verifier_temperature,
        )
        outcomes = self.hub.sample_n(request, BackendRole.VERIFIER, self.config.verifier_samples)
        if all(o.error is not None for o in outcomes):
            transport = next(
                (o.error for o in outcomes if isinstance(o.error, TransportError)), None
            )
            if transport is not None:
                raise PipelineInterrupted(
                    f"verifier unreachable: {transport}", self.checkpoint_path
                )
            logger.warning("origin %s: no usable verifier sample: %s",
                           work.origin_id, outcomes[0].error)
            return None, None
        passing: list[_Candidate] = []
        gold = work.trajectory.answer
        for outcome in outcomes:
            if outcome.response is None:
                continue
            candidate = _candidate_from_sample(outcome.response.text)
            if candidate is None:
                continue
            if equivalent(candidate.answer, gold, self.config.tolerance):
                passing.append(candidate)
        if not passing:
            return None, None
        best = min(passing, key=lambda c: len(c.steps))
        return best, best.answer

    # -- checkpointing ------------------------------------------------------

    def _snapshot(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "iterations": self.stats.iterations,
            "queue": [
                {"origin_id": w.origin_id, "trajectory": trajectory_to_record(w.trajectory)}
                for w in self.queue
            ],
            "entries": [
                {
                    "triplet": triplet_to_record(e.triplet),
                    "provenance": asdict(e.provenance),
                }
                for e in self.by_key.values()
            ],
            "stats": self.stats.as_dict(),
        }

    def save_checkpoint(self) -> None:
        if self.checkpoint_path is None:
            return
        tmp = self.checkpoint_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self._snapshot(), fh)
        os.replace(tmp, self.checkpoint_path)

    def restore(self, snapshot: dict) -> None:
        if snapshot.get("version") != CHECKPOINT_VERSION:
            raise PipelineError(f"unsupported checkpoint version {snapshot.get('version')!r}")
        self.queue = [
            _Work(obj["origin_id"], trajectory_from_record(obj["trajectory"]))
            for obj in snapshot["queue"]
        ]
        self.by_key = {}
        for obj in snapshot["entries"]:
            triplet = triplet_from_record(obj["triplet"])
            entry = CorpusEntry(triplet, Provenance(**obj["provenance"]))
            self.by_key[dedup_key(triplet)] = entry
        stats_obj = snapshot["stats"]
        per_iteration = [IterationStats(**row) for row in stats_obj.pop("per_iteration", [])]
        self.stats = BuildStats(**{k: v for k, v in stats_obj.items()})
        self.stats.per_iteration = per_iteration

    # -- main loop ----------------------------------------------------------

    def run(self) -> BuildResult:
        self._drain(None, iteration=self.stats.iterations)
        self.save_checkpoint()
        while self.queue:
            if self.stats.iterations >= self.config.max_iterations:
                logger.warning(
                    "iteration cap %d reached with %d trajectories unfinished",
                    self.config.max_iterations,
                    len(self.queue),
                )
                break
            self.stats.iterations += 1
            row = IterationStats(iteration=self.stats.iterations)
            next_queue: list[_Work] = []
            for work in self.queue:
                row.processed += 1
                reduced = self._annotate(work)
                if reduced is None:
                    self.stats.dropped_annotator += 1
                    row.dropped_annotator += 1
                    continue
                best, verified_answer = self._verify(work, reduced)
                if best is None:
                    self.stats.dropped_verifier += 1
                    row.dropped_verifier += 1
                    continue
                triplet = Triplet(
                    question=work.trajectory.question,
                    step=work.trajectory.steps[0],
                    outcome=Transition.reduce(reduced),
                )
                self._emit(
                    CorpusEntry(
                        triplet,
                        Provenance(
                            origin_id=work.origin_id,
                            iteration=self.stats.iterations,
                            source=SOURCE_SEED,
                            gold_answer=work.trajectory.answer,
                            verified_answer=verified_answer,
                        ),
                    )
                )
                self.stats.reduces += 1
                row.reduced += 1
                if len(best.steps) < work.trajectory.length:
                    next_queue.append(
                        _Work(
                            work.origin_id,
                            Trajectory(
                                question=reduced,
                                steps=best.steps,
                                answer=work.trajectory.answer,
                            ),
                        )
                    )
                else:
                    # Requeueing a sample at least as long would break the
                    # strictly-shrinking guarantee; keep the reduction, stop
                    # walking this origin.
                    self.stats.tail_dropped += 1
                    row.tail_dropped += 1
            self.queue = next_queue
            self._drain(row, iteration=self.stats.iterations)
            self.stats.per_iteration.append(row)
            self.save_checkpoint()
        ordered = sorted(self.by_key.items(), key=lambda kv: _entry_rank(kv[1]))
        corpus = SeedCorpus(tuple(entry for _, entry in ordered))
        leftover = tuple(w.trajectory for w in self.queue)
        return BuildResult(corpus=corpus, stats=self.stats, leftover=leftover)


def build_seed(
    trajectories: Sequence[Trajectory],
    hub: BackendHub,
    config: PipelineConfig = PipelineConfig(),
    origin_ids: Sequence[str] | None = None,
    checkpoint_path: str | None = None,
    resume: bool = False,
) -> BuildResult:
    """Construct seed triplets from gold trajectories.

    With resume=True and an existing checkpoint file, the input
    trajectories are ignored and the walk continues from the snapshot.
    """
    builder = _SeedBuilder(hub, config, checkpoint_path)
    if resume and checkpoint_path and os.path.exists(checkpoint_path):
        with open(checkpoint_path, "r", encoding="utf-8") as fh:
            builder.restore(json.load(fh))
        logger.info("resumed from %s: %d queued, %d emitted", checkpoint_path,
                    len(builder.queue), len(builder.by_key))
    else:
        if origin_ids is None:
            origin_ids = [f"t{i:06d}" for i in range(len(trajectories))]
        if len(origin_ids) != len(trajectories):
            raise PipelineError("origin_ids and trajectories must align")
        builder.queue = [_Work(oid, t) for oid, t in zip(origin_ids, trajectories)]
    return builder.run()


@dataclass
class DistillStats:
    attempted: int = 0
    solved: int = 0
    verified: int = 0
    rejected_answer: int = 0
    failed: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def self_distill(
    pairs: Sequence[tuple[str, str]],
    hub: BackendHub,
    executor: Executor,
    solve_config: SolveConfig = SolveConfig(),
    tolerance: float = DEFAULT_TOLERANCE,
    origin_ids: Sequence[str] | None = None,
    on_record: Callable[[object], None] | None = None,
) -> tuple[SeedCorpus, DistillStats]:
    """Solve question/answer pairs and keep answer-verified chains.

    A chain only contributes triplets when its final answer matches the
    gold answer; anything else is logged and skipped.
    """
    if origin_ids is None:
        origin_ids = [f"d{i:06d}" for i in range(len(pairs))]
    if len(origin_ids) != len(pairs):
        raise PipelineError("origin_ids and pairs must align")
    stats = DistillStats()
    by_key: dict[str, CorpusEntry] = {}
    for origin_id, (question, gold) in zip(origin_ids, pairs):
        stats.attempted += 1
        record = solve_mcot(question, hub, executor, solve_config)
        if on_record is not None:
            on_record(record)
        if not record.solved or record.final_answer is None:
            stats.failed += 1
            logger.info("distill %s: unsolved (%s)", origin_id, record.stop_reason.value)
            continue
        stats.solved += 1
        if not equivalent(record.final_answer, gold, tolerance):
            stats.rejected_answer += 1
            logger.info("distill %s: answer %r does not match gold %r",
                        origin_id, record.final_answer, gold)
            continue
        stats.verified += 1
        assert record.chain is not None
        for triplet in decompose_chain(record.chain):
            entry = CorpusEntry(
                triplet,
                Provenance(
                    origin_id=origin_id,
                    iteration=0,
                    source=SOURCE_SELF_DISTILL,
                    gold_answer=gold,
                    verified_answer=record.final_answer,
                ),
            )
            key = dedup_key(triplet)
            kept = by_key.get(key)
            if kept is None or _entry_rank(entry) < _entry_rank(kept):
                by_key[key] = entry
    ordered = sorted(by_key.items(), key=lambda kv: _entry_rank(kv[1]))
    return SeedCorpus(tuple(entry for _, entry in ordered)), stats


# On-disk form: the triplet file carries the training rows; provenance
# travels in a sidecar aligned by dedup key.


def corpus_to_records(corpus: SeedCorpus) -> tuple[list[dict], list[dict]]:
    triplet_rows = []
    provenance_rows = []
    for entry in corpus.entries:
        key = dedup_key(entry.triplet)
        triplet_rows.append(triplet_to_record(entry.triplet))
        provenance_rows.append({"dedup_key": key, **asdict(entry.provenance)})
    return triplet_rows, provenance_rows


def corpus_from_records(
    triplet_rows: Sequence[dict], provenance_rows: Sequence[dict] | None = None
) -> SeedCorpus:
    provenance_by_key: dict[str, Provenance] = {}
    if provenance_rows:
        for row in provenance_rows:
            data = {k: v for k, v in row.items() if k != "dedup_key"}
            provenance_by_key[row["dedup_key"]] = Provenance(**data)
    entries = []
    for row in triplet_rows:
        triplet = triplet_from_record(row)
        key = dedup_key(triplet)
        provenance = provenance_by_key.get(
            key, Provenance(origin_id="unknown", iteration=0, source=SOURCE_SEED)
        )
        entries.append(CorpusEntry(triplet, provenance))
    return SeedCorpus(tuple(entries))
