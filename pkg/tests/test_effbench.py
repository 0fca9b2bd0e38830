import random
from fractions import Fraction

import pytest

from cases import QUADRATIC_CASE, run_case
from mcot.effbench import (
    AlignmentError,
    ComparisonTable,
    CostModelParams,
    DEFAULT_STEP_PROFILE,
    EfficiencyReport,
    StepBudget,
    UndefinedMetricError,
    calibrate_attn_cost,
    compare,
    measured_report,
    metric_E,
    model_run_cost,
    profile_from_json,
    report_to_record,
    simulate_step_decode_times,
    step_decode_times,
    step_mean_decode_context,
)
from mcot.reasoners import MCOT_STRATEGY, MSR_STRATEGY, StepTelemetry


def _step(index, decode_time, completion_tokens, prompt_tokens=100):
    return StepTelemetry(
        step_index=index,
        prompt_tokens=prompt_tokens,
        completion_tokens=completion_tokens,
        decode_time=decode_time,
        exec_time=0.0,
        modeled_cache_bytes=prompt_tokens + completion_tokens,
    )


def test_metric_two_step_fixture_is_exact():
    telemetry = [_step(1, 1.0, 10), _step(2, 3.0, 20)]
    assert metric_E(telemetry) == 0.125


def test_metric_permutation_invariance():
    rng = random.Random(1234)
    telemetry = [
        _step(i + 1, rng.random() * 10 ** rng.randint(-6, 6), rng.randint(1, 4096))
        for i in range(60)
    ]
    reference = metric_E(telemetry)
    for _ in range(100):
        rng.shuffle(telemetry)
        assert metric_E(telemetry) == reference


def test_metric_undefined_cases():
    with pytest.raises(UndefinedMetricError):
        metric_E([])
    with pytest.raises(UndefinedMetricError):
        metric_E([_step(1, 1.0, 10), StepTelemetry(2, 10, 0, 1.0, 0.0, 0)])


def test_budget_and_params_validation():
    with pytest.raises(ValueError):
        StepBudget(-1, 10)
    with pytest.raises(ValueError):
        StepBudget(10, 0)
    with pytest.raises(ValueError):
        CostModelParams(layers=0, kv_heads=32, head_dim=128)
    with pytest.raises(ValueError):
        CostModelParams(layers=32, kv_heads=32, head_dim=128, base_cost=-1.0)


def test_cache_bytes_per_token():
    params = CostModelParams(layers=32, kv_heads=32, head_dim=128, bytes_per_element=2)
    assert params.cache_bytes_per_token == 2 * 32 * 32 * 128 * 2


_PARAMS = CostModelParams(
    layers=32, kv_heads=32, head_dim=128, base_cost=0.42,
    attn_cost_per_context_token=3e-4,
)


def test_default_profile_prompt_curves():
    assert len(DEFAULT_STEP_PROFILE) == 8
    mcot = model_run_cost(MCOT_STRATEGY, DEFAULT_STEP_PROFILE, _PARAMS)
    assert mcot.prompt_length_curve == (224,) * 8
    assert all(n <= 512 for n in mcot.prompt_length_curve)

    msr = model_run_cost(MSR_STRATEGY, DEFAULT_STEP_PROFILE, _PARAMS)
    expected = tuple(336 * t + 224 for t in range(8))
    assert msr.prompt_length_curve == expected
    assert msr.prompt_length_curve[5] < 2048
    assert msr.prompt_length_curve[6] > 2048


def test_closed_form_matches_simulation_exactly():
    rng = random.Random(99)
    for _ in range(25):
        profile = [
            StepBudget(rng.randint(0, 400), rng.randint(1, 300))
            for _ in range(rng.randint(1, 8))
        ]
        params = CostModelParams(
            layers=rng.randint(1, 64),
            kv_heads=rng.randint(1, 64),
            head_dim=rng.choice([64, 128]),
            base_cost=rng.random(),
            attn_cost_per_context_token=rng.random() * 1e-3,
        )
        for strategy in (MCOT_STRATEGY, MSR_STRATEGY):
            closed = step_decode_times(strategy, profile, params)
            brute = simulate_step_decode_times(strategy, profile, params)
            assert closed == brute


def test_step_mean_decode_context():
    assert step_mean_decode_context(MCOT_STRATEGY, DEFAULT_STEP_PROFILE, 1) == Fraction(559, 2)
    assert step_mean_decode_context(MSR_STRATEGY, DEFAULT_STEP_PROFILE, 7) == Fraction(4591, 2)
    with pytest.raises(ValueError):
        step_mean_decode_context(MCOT_STRATEGY, DEFAULT_STEP_PROFILE, 0)
    with pytest.raises(ValueError):
        step_mean_decode_context(MCOT_STRATEGY, DEFAULT_STEP_PROFILE, 9)


def test_calibration_hits_target_at_reference():
    reference = step_mean_decode_context(MSR_STRATEGY, DEFAULT_STEP_PROFILE, 7)
    attn = calibrate_attn_cost(1.12, reference, 0.42)
    assert attn > 0
    assert 0.42 + attn * float(reference) == pytest.approx(1.12, abs=1e-12)


def test_calibration_validation():
    with pytest.raises(ValueError):
        calibrate_attn_cost(1.0, 0, 0.5)
    with pytest.raises(ValueError):
        calibrate_attn_cost(0.4, 100, 0.5)


def test_model_run_cost_internal_consistency():
    report = model_run_cost(MSR_STRATEGY, DEFAULT_STEP_PROFILE, _PARAMS)
    assert isinstance(report, EfficiencyReport)
    assert report.kind == "modeled"
    assert report.E == metric_E(report.per_step)
    times = step_decode_times(MSR_STRATEGY, DEFAULT_STEP_PROFILE, _PARAMS)
    assert report.total_time == float(sum(times, Fraction(0)))
    assert [t.decode_time for t in report.per_step] == [float(x) for x in times]
    assert [t.prompt_tokens for t in report.per_step] == list(report.prompt_length_curve)

    bytes_per_token = _PARAMS.cache_bytes_per_token
    peaks = [
        bytes_per_token * (start + budget.completion_tokens)
        for start, budget in zip(report.prompt_length_curve, DEFAULT_STEP_PROFILE)
    ]
    assert [t.modeled_cache_bytes for t in report.per_step] == peaks
    assert report.peak_cache_bytes == max(peaks)
    assert 0 < report.mean_cache_bytes < report.peak_cache_bytes


def test_model_run_cost_memoryless_is_cheaper():
    mcot = model_run_cost(MCOT_STRATEGY, DEFAULT_STEP_PROFILE, _PARAMS)
    msr = model_run_cost(MSR_STRATEGY, DEFAULT_STEP_PROFILE, _PARAMS)
    assert mcot.E < msr.E
    assert mcot.peak_cache_bytes < msr.peak_cache_bytes
    assert mcot.total_time < msr.total_time


def test_model_run_cost_rejects_bad_input():
    with pytest.raises(UndefinedMetricError):
        model_run_cost(MCOT_STRATEGY, [], _PARAMS)
    with pytest.raises(ValueError):
        model_run_cost("other", DEFAULT_STEP_PROFILE, _PARAMS)


def test_measured_report_from_replay():
    record, _, _ = run_case(QUADRATIC_CASE)
    short, _, _ = run_case(QUADRATIC_CASE)
    report = measured_report([record, short], "approximate")
    assert report.kind == "measured"
    assert len(report.per_step) == 4
    assert report.token_counting == "approximate"
    assert report.E == metric_E(report.per_step)
    assert report.prompt_length_curve == tuple(t.prompt_tokens for t in record.telemetry)


def test_measured_report_skips_empty_and_requires_telemetry():
    record, _, _ = run_case(QUADRATIC_CASE)
    from mcot.reasoners import RunRecord, StopReason

    empty = RunRecord("mcot", "q", None, (), StopReason.BACKEND_ERROR)
    report = measured_report([empty, record], "approximate")
    assert len(report.per_step) == len(record.telemetry)
    with pytest.raises(UndefinedMetricError):
        measured_report([empty], "approximate")


def _solved_records():
    import dataclasses

    record, _, _ = run_case(QUADRATIC_CASE)
    timed = tuple(
        dataclasses.replace(t, decode_time=0.5 * (i + 1))
        for i, t in enumerate(record.telemetry)
    )
    return [dataclasses.replace(record, telemetry=timed)]


def test_compare_identical_sets():
    records = _solved_records()
    table = compare(records, records, labels=("left", "right"))
    assert isinstance(table, ComparisonTable)
    assert table.e_ratio == 1.0
    assert table.cache_ratio == 1.0
    rows = table.rows()
    assert len(rows) == 3
    assert rows[0]["label"] == "left"
    assert rows[2]["label"] == "left/right"
    assert rows[2]["mean_E"] == 1.0


def test_compare_accuracy_against_gold():
    records = _solved_records()
    gold_right = {QUADRATIC_CASE.question: QUADRATIC_CASE.gold_answer}
    table = compare(records, records, gold=gold_right)
    assert table.side_a.accuracy == 1.0
    gold_wrong = {QUADRATIC_CASE.question: "7"}
    table = compare(records, records, gold=gold_wrong)
    assert table.side_a.accuracy == 0.0


def test_compare_alignment_errors():
    records = _solved_records()
    with pytest.raises(AlignmentError):
        compare([], records)
    other, _, _ = run_case(QUADRATIC_CASE)
    relabeled = [
        type(other)(
            strategy=other.strategy,
            question="a different question",
            chain=other.chain,
            telemetry=other.telemetry,
            stop_reason=other.stop_reason,
            final_answer=other.final_answer,
            failure_text=other.failure_text,
        )
    ]
    with pytest.raises(AlignmentError):
        compare(records, relabeled)


def test_report_record_shape():
    report = model_run_cost(MCOT_STRATEGY, DEFAULT_STEP_PROFILE, _PARAMS)
    rec = report_to_record(report)
    assert rec["strategy"] == MCOT_STRATEGY
    assert rec["E"] == report.E
    assert len(rec["per_step"]) == 8
    assert rec["prompt_length_curve"] == [224] * 8
    assert set(rec["per_step"][0]) == {
        "step_index", "prompt_tokens", "completion_tokens",
        "decode_time", "exec_time", "modeled_cache_bytes",
    }


def test_profile_parsing():
    text = '[{"prompt_tokens": 10, "completion_tokens": 5}]'
    assert profile_from_json(text) == [StepBudget(10, 5)]
    wrapped = '{"steps": [{"prompt_tokens": 1, "completion_tokens": 2}]}'
    assert profile_from_json(wrapped) == [StepBudget(1, 2)]
    with pytest.raises(ValueError):
        profile_from_json("[]")
    with pytest.raises(ValueError):
        profile_from_json('["not an object"]')
    with pytest.raises((KeyError, ValueError)):
        profile_from_json('[{"prompt_tokens": 3}]')


def test_mean_decode_context_tracks_curve():
    for step in range(1, 9):
        start = model_run_cost(MSR_STRATEGY, DEFAULT_STEP_PROFILE, _PARAMS).prompt_length_curve[step - 1]
        mean = step_mean_decode_context(MSR_STRATEGY, DEFAULT_STEP_PROFILE, step)
        assert mean == start + Fraction(111, 2)
