"""Decoding-efficiency metrics and the key/value-cache cost model.

The headline metric is seconds of decode time per generated token,
averaged over steps.  The cost model prices each decoded token as a
fixed base cost plus a linear attention cost in the resident context,
and prices cache residency as bytes per context token.  Closed-form
step times are computed in exact rational arithmetic and are verified
against a per-token simulation, so the two agree exactly rather than
approximately.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

from . import verifier
from .reasoners import MCOT_STRATEGY, MSR_STRATEGY, RunRecord, StepTelemetry

DEFAULT_BYTES_PER_ELEMENT = 2


class UndefinedMetricError(ValueError):
    """Seconds-per-token is undefined (no steps, or a zero-token step)."""


class AlignmentError(ValueError):
    """Two record sets cannot be compared row for row."""


@dataclass(frozen=True, slots=True)
class CostModelParams:
    """Decoder shape and per-token costs for the cost model."""

    layers: int
    kv_heads: int
    head_dim: int
    bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT
    base_cost: float = 0.0
    attn_cost_per_context_token: float = 0.0

    def __post_init__(self) -> None:
        for name in ("layers", "kv_heads", "head_dim", "bytes_per_element"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.base_cost < 0 or self.attn_cost_per_context_token < 0:
            raise ValueError("costs must be >= 0")

    @property
    def cache_bytes_per_token(self) -> int:
        # Two tensors (key and value) per layer per context token.
        return 2 * self.layers * self.kv_heads * self.head_dim * self.bytes_per_element


@dataclass(frozen=True, slots=True)
class StepBudget:
    """Token counts one step adds: fresh prompt tokens, then completions."""

    prompt_tokens: int
    completion_tokens: int

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0:
            raise ValueError("prompt_tokens must be >= 0")
        if self.completion_tokens < 1:
            raise ValueError("completion_tokens must be >= 1")


# A profile typical of tool-augmented math derivations: per-step prompts
# stay well under a 512-token budget and completions under 128 tokens,
# while the accumulated full-history prompt first exceeds 2048 tokens at
# the seventh step.
DEFAULT_STEP_PROFILE: tuple[StepBudget, ...] = tuple(StepBudget(224, 112) for _ in range(8))


@dataclass(frozen=True, slots=True)
class EfficiencyReport:
    strategy: str
    kind: str  # "modeled" or "measured"
    per_step: tuple[StepTelemetry, ...]
    E: float
    total_time: float
    peak_cache_bytes: int
    mean_cache_bytes: float
    prompt_length_curve: tuple[int, ...]
    token_counting: str


def metric_E(telemetry: Sequence[StepTelemetry]) -> float:
    """Mean decode seconds per generated token across steps.

    Uses an exactly rounded sum, so the result does not depend on step
    order.  A step that generated no tokens makes the metric undefined.
    """
    if not telemetry:
        raise UndefinedMetricError("metric needs at least one step")
    for t in telemetry:
        if t.completion_tokens < 1:
            raise UndefinedMetricError(
                f"step {t.step_index} generated no tokens; seconds-per-token is undefined"
            )
    return math.fsum(t.decode_time / t.completion_tokens for t in telemetry) / len(telemetry)


def _start_contexts(strategy: str, profile: Sequence[StepBudget]) -> list[int]:
    """Context resident when each step starts decoding (its prompt length)."""
    starts: list[int] = []
    carried = 0
    for budget in profile:
        starts.append(carried + budget.prompt_tokens)
        if strategy == MSR_STRATEGY:
            carried += budget.prompt_tokens + budget.completion_tokens
        elif strategy != MCOT_STRATEGY:
            raise ValueError(f"unknown strategy {strategy!r}")
    return starts


def step_decode_times(
    strategy: str, profile: Sequence[StepBudget], params: CostModelParams
) -> list[Fraction]:
    """Closed-form decode time per step, exact.

    Token k of a step (k = 0..c-1) costs base + attn * (start + k);
    summing over k gives c*base + attn*(c*start + c*(c-1)/2).
    """
    base = Fraction(params.base_cost)
    attn = Fraction(params.attn_cost_per_context_token)
    times: list[Fraction] = []
    for start, budget in zip(_start_contexts(strategy, profile), profile):
        c = budget.completion_tokens
        times.append(c * base + attn * (c * start + Fraction(c * (c - 1), 2)))
    return times


def simulate_step_decode_times(
    strategy: str, profile: Sequence[StepBudget], params: CostModelParams
) -> list[Fraction]:
    """Per-token brute-force decode times; must equal the closed form."""
    base = Fraction(params.base_cost)
    attn = Fraction(params.attn_cost_per_context_token)
    times: list[Fraction] = []
    for start, budget in zip(_start_contexts(strategy, profile), profile):
        total = Fraction(0)
        for k in range(budget.completion_tokens):
            total += base + attn * (start + k)
        times.append(total)
    return times


def step_mean_decode_context(
    strategy: str, profile: Sequence[StepBudget], step_index: int
) -> Fraction:
    """Average resident context while decoding the given step (1-based)."""
    if not 1 <= step_index <= len(profile):
        raise ValueError(f"step_index {step_index} out of range")
    start = _start_contexts(strategy, profile)[step_index - 1]
    c = profile[step_index - 1].completion_tokens
    return start + Fraction(c - 1, 2)


def calibrate_attn_cost(
    target_seconds_per_token: float,
    reference_context: Fraction | float,
    base_cost: float,
) -> float:
    """attn cost that makes a token at the reference context cost the target."""
    reference = Fraction(reference_context)
    if reference <= 0:
        raise ValueError("reference context must be positive")
    surplus = Fraction(target_seconds_per_token) - Fraction(base_cost)
    if surplus <= 0:
        raise ValueError("target must exceed the base cost")
    return float(surplus / reference)


def model_run_cost(
    strategy: str, profile: Sequence[StepBudget], params: CostModelParams
) -> EfficiencyReport:
    """Predict per-step telemetry and aggregates for a token profile."""
    if not profile:
        raise UndefinedMetricError("profile needs at least one step")
    starts = _start_contexts(strategy, profile)
    times = step_decode_times(strategy, profile, params)
    bytes_per_token = params.cache_bytes_per_token

    per_step: list[StepTelemetry] = []
    weighted_context = Fraction(0)
    total_tokens = 0
    for index, (start, budget, decode_time) in enumerate(zip(starts, profile, times), start=1):
        c = budget.completion_tokens
        peak_context = start + c
        per_step.append(
            StepTelemetry(
                step_index=index,
                prompt_tokens=start,
                completion_tokens=c,
                decode_time=float(decode_time),
                exec_time=0.0,
                modeled_cache_bytes=bytes_per_token * peak_context,
            )
        )
        weighted_context += c * start + Fraction(c * (c - 1), 2)
        total_tokens += c

    total_time = float(sum(times, Fraction(0)))
    mean_cache = float(Fraction(bytes_per_token) * weighted_context / total_tokens)
    return EfficiencyReport(
        strategy=strategy,
        kind="modeled",
        per_step=tuple(per_step),
        E=metric_E(per_step),
        total_time=total_time,
        peak_cache_bytes=max(t.modeled_cache_bytes for t in per_step),
        mean_cache_bytes=mean_cache,
        prompt_length_curve=tuple(starts),
        token_counting="profile",
    )


def measured_report(records: Sequence[RunRecord], token_counting: str) -> EfficiencyReport:
    """Aggregate live telemetry from solving runs into one report.

    Steps are concatenated in run order; records without telemetry are
    skipped.  The prompt length curve is taken from the longest run.
    """
    per_step: list[StepTelemetry] = []
    curve: tuple[int, ...] = ()
    strategy = records[0].strategy if records else MCOT_STRATEGY
    for record in records:
        if not record.telemetry:
            continue
        per_step.extend(record.telemetry)
        run_curve = tuple(t.prompt_tokens for t in record.telemetry)
        if len(run_curve) > len(curve):
            curve = run_curve
    if not per_step:
        raise UndefinedMetricError("no telemetry in any record")
    total_time = math.fsum(t.decode_time for t in per_step)
    total_tokens = sum(t.completion_tokens for t in per_step)
    mean_cache = math.fsum(
        t.modeled_cache_bytes * t.completion_tokens for t in per_step
    ) / total_tokens
    return EfficiencyReport(
        strategy=strategy,
        kind="measured",
        per_step=tuple(per_step),
        E=metric_E(per_step),
        total_time=total_time,
        peak_cache_bytes=max(t.modeled_cache_bytes for t in per_step),
        mean_cache_bytes=mean_cache,
        prompt_length_curve=curve,
        token_counting=token_counting,
    )


@dataclass(frozen=True, slots=True)
class ComparisonSide:
    label: str
    runs: int
    mean_E: float | None
    mean_peak_cache_bytes: float | None
    accuracy: float | None


@dataclass(frozen=True, slots=True)
class ComparisonTable:
    side_a: ComparisonSide
    side_b: ComparisonSide
    e_ratio: float | None
    cache_ratio: float | None

    def rows(self) -> list[dict]:
        out = []
        for side in (self.side_a, self.side_b):
            out.append(
                {
                    "label": side.label,
                    "runs": side.runs,
                    "mean_E": side.mean_E,
                    "mean_peak_cache_bytes": side.mean_peak_cache_bytes,
                    "accuracy": side.accuracy,
                }
            )
        out.append(
            {
                "label": f"{self.side_a.label}/{self.side_b.label}",
                "runs": None,
                "mean_E": self.e_ratio,
                "mean_peak_cache_bytes": self.cache_ratio,
                "accuracy": None,
            }
        )
        return out


def _side_summary(
    label: str,
    records: Sequence[RunRecord],
    gold: Mapping[str, str] | None,
    tol: float,
) -> ComparisonSide:
    es: list[float] = []
    peaks: list[int] = []
    for record in records:
        if record.telemetry:
            es.append(metric_E(record.telemetry))
            peaks.append(record.peak_cache_bytes)
    accuracy = None
    if gold is not None:
        hits = 0
        for record in records:
            expected = gold.get(record.question)
            if expected is not None and record.final_answer is not None:
                if verifier.equivalent(record.final_answer, expected, tol):
                    hits += 1
        accuracy = hits / len(records)
    return ComparisonSide(
        label=label,
        runs=len(records),
        mean_E=(math.fsum(es) / len(es)) if es else None,
        mean_peak_cache_bytes=(math.fsum(peaks) / len(peaks)) if peaks else None,
        accuracy=accuracy,
    )


def compare(
    records_a: Sequence[RunRecord],
    records_b: Sequence[RunRecord],
    gold: Mapping[str, str] | None = None,
    tol: float = verifier.DEFAULT_TOLERANCE,
    labels: tuple[str, str] = ("a", "b"),
) -> ComparisonTable:
    """Side-by-side aggregates for two runs over the same question set."""
    if not records_a or not records_b:
        raise AlignmentError("both record sets must be non-empty")
    questions_a = sorted(r.question for r in records_a)
    questions_b = sorted(r.question for r in records_b)
    if questions_a != questions_b:
        raise AlignmentError("record sets cover different question sets")
    side_a = _side_summary(labels[0], records_a, gold, tol)
    side_b = _side_summary(labels[1], records_b, gold, tol)
    e_ratio = None
    if side_a.mean_E and side_b.mean_E:
        e_ratio = side_a.mean_E / side_b.mean_E
    cache_ratio = None
    if side_a.mean_peak_cache_bytes and side_b.mean_peak_cache_bytes:
        cache_ratio = side_a.mean_peak_cache_bytes / side_b.mean_peak_cache_bytes
    return ComparisonTable(side_a=side_a, side_b=side_b, e_ratio=e_ratio, cache_ratio=cache_ratio)


def report_to_record(report: EfficiencyReport) -> dict:
    return {
        "strategy": report.strategy,
        "kind": report.kind,
        "E": report.E,
        "total_time": report.total_time,
        "peak_cache_bytes": report.peak_cache_bytes,
        "mean_cache_bytes": report.mean_cache_bytes,
        "prompt_length_curve": list(report.prompt_length_curve),
        "token_counting": report.token_counting,
        "per_step": [
            {
                "step_index": t.step_index,
                "prompt_tokens": t.prompt_tokens,
                "completion_tokens": t.completion_tokens,
                "decode_time": t.decode_time,
                "exec_time": t.exec_time,
                "modeled_cache_bytes": t.modeled_cache_bytes,
            }
            for t in report.per_step
        ],
    }


def profile_from_json(text: str) -> list[StepBudget]:
    """Parse a step profile: a JSON list of {prompt_tokens, completion_tokens}."""
    data = json.loads(text)
    if isinstance(data, dict):
        data = data.get("steps")
    if not isinstance(data, list) or not data:
        raise ValueError("profile must be a non-empty list of steps")
    steps = []
    for i, obj in enumerate(data):
        if not isinstance(obj, dict):
            raise ValueError(f"profile step {i} must be an object")
        steps.append(
            StepBudget(
                prompt_tokens=int(obj["prompt_tokens"]),
                completion_tokens=int(obj["completion_tokens"]),
            )
        )
    return steps
