"""Command-line entry point.

Every command is deterministic under mock backends and a fixed seed:
outputs carry no wall-clock timestamps and JSON keys are sorted, so
golden-file comparisons work byte for byte.

Exit codes: 0 success, 1 runtime failures (per-question records are
still written), 2 configuration or usage problems.
"""

from __future__ import annotations

import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import click

from .backend import BackendConfigError, BackendHub
from .chain import ChainError, ExecStatus, ExecutionResult, Trajectory, trajectory_from_record
from .config import AppConfig, ConfigError, load_config
from .effbench import (
    AlignmentError,
    CostModelParams,
    UndefinedMetricError,
    calibrate_attn_cost,
    compare as compare_records,
    measured_report,
    metric_E,
    model_run_cost,
    profile_from_json,
    report_to_record,
    step_mean_decode_context,
)
from .executor import Executor, ExecutorConfigError, ExecutorError
from .jsonl import dumps_line, read_records, write_records
from .pipeline import (
    PipelineError,
    PipelineInterrupted,
    build_seed,
    corpus_from_records,
    corpus_to_records,
    filter_dedup,
    self_distill,
)
from .reasoners import (
    MCOT_STRATEGY,
    MSR_STRATEGY,
    RunRecord,
    StopReason,
    run_record_from_record,
    run_record_to_record,
    solve as run_solve,
)

MALFORMED_BUDGET = 0.10

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class _DataError(Exception):
    """Input file too damaged to proceed; maps to the usage exit code."""


class _NullExecutor:
    """Stands in when no executor is configured; code steps see a harness
    error instead of crashing the run."""

    def execute(self, code: str) -> ExecutionResult:
        return ExecutionResult(
            status=ExecStatus.ERROR,
            stderr="[harness] no executor configured",
        )


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn: Callable[[], int]) -> None:
    """Run a command body, translating exceptions to exit codes."""
    try:
        code = fn()
    except (ConfigError, BackendConfigError, ExecutorConfigError, _DataError) as exc:
        _fail(EXIT_CONFIG, str(exc))
        return
    except AlignmentError as exc:
        _fail(EXIT_CONFIG, str(exc))
        return
    except PipelineInterrupted as exc:
        message = str(exc)
        if exc.checkpoint_path:
            message += f" (checkpoint saved to {exc.checkpoint_path}; rerun with --resume)"
        _fail(EXIT_RUNTIME, message)
        return
    except (PipelineError, UndefinedMetricError, ExecutorError, OSError) as exc:
        _fail(EXIT_RUNTIME, str(exc))
        return
    sys.exit(code)


def _load_jsonl(path: str, what: str) -> list[dict]:
    """Read a record file under the malformed-line budget."""
    try:
        records, bad = read_records(path)
    except OSError as exc:
        raise _DataError(f"cannot read {what} file {path}: {exc}") from exc
    total = len(records) + len(bad)
    if total == 0:
        click.echo(f"warning: {what} file {path} is empty", err=True)
        return []
    if bad:
        share = len(bad) / total
        if share > MALFORMED_BUDGET:
            raise _DataError(
                f"{path}: {len(bad)} of {total} lines malformed "
                f"({share:.0%} > {MALFORMED_BUDGET:.0%} budget), lines {bad[:10]}"
            )
        click.echo(
            f"warning: {path}: skipped {len(bad)} malformed line(s): {bad[:10]}",
            err=True,
        )
    return records


def _write_out(path: str | None, records: Sequence[dict]) -> None:
    if path is None or path == "-":
        for record in records:
            click.echo(dumps_line(record))
    else:
        write_records(path, records)


def _build_runtime(
    backend_path: str, seed: int | None, need_executor: bool
) -> tuple[AppConfig, BackendHub, Executor]:
    config = load_config(backend_path, seed_override=seed)
    hub = config.build_hub()
    executor: Executor
    if need_executor and config.executor.kind != "none":
        executor = config.build_executor()
    else:
        executor = _NullExecutor()
    return config, hub, executor


@click.group()
@click.version_option(package_name="mcot")
def main() -> None:
    """Memoryless step-by-step math solving and its dataset tooling."""


# -- solve -------------------------------------------------------------------


@main.command()
@click.argument("question_or_file")
@click.option("--strategy", type=click.Choice([MCOT_STRATEGY, MSR_STRATEGY]),
              default=MCOT_STRATEGY, show_default=True)
@click.option("--backend", "backend_path", required=True,
              help="TOML run configuration.")
@click.option("--max-steps", type=click.IntRange(min=1), default=None,
              help="Override the configured step cap.")
@click.option("--out", "out_path", default=None, help="Output JSONL (default stdout).")
@click.option("--seed", type=int, default=None,
              help="Sampling seed for mock backends (default 0).")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True,
              help="Questions solved in parallel.")
def solve(question_or_file: str, strategy: str, backend_path: str,
          max_steps: int | None, out_path: str | None, seed: int | None,
          jobs: int) -> None:
    """Solve one question or a JSONL file of {"question": ...} records."""

    def body() -> int:
        config, hub, executor = _build_runtime(backend_path, seed, need_executor=True)
        solve_config = config.solve
        if max_steps is not None:
            solve_config = replace(solve_config, max_steps=max_steps)

        if Path(question_or_file).exists():
            rows = _load_jsonl(question_or_file, "question")
            questions = []
            skipped = 0
            for row in rows:
                text = row.get("question")
                if isinstance(text, str) and text.strip():
                    questions.append(text)
                else:
                    skipped += 1
            if skipped:
                click.echo(f"warning: skipped {skipped} record(s) without a question", err=True)
        else:
            questions = [question_or_file]

        if not questions:
            _write_out(out_path, [])
            return EXIT_OK

        def solve_one(question: str) -> RunRecord:
            return run_solve(strategy, question, hub, executor, solve_config)

        if jobs == 1:
            results = [solve_one(q) for q in questions]
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(solve_one, questions))

        _write_out(out_path, [run_record_to_record(r) for r in results])
        for record in results:
            if record.stop_reason is not StopReason.FINAL:
                detail = record.failure_text or record.stop_reason.value
                click.echo(f"warning: {record.question[:60]!r}: {detail}", err=True)

        if all(r.stop_reason is StopReason.BACKEND_ERROR for r in results):
            _fail(EXIT_CONFIG, "backend unreachable: every run failed before completing a step")
        if any(r.stop_reason is not StopReason.FINAL for r in results):
            return EXIT_RUNTIME
        return EXIT_OK

    _guard(body)


# -- pipeline ----------------------------------------------------------------


@main.group()
def pipeline() -> None:
    """Build and maintain step-level training corpora."""


def _write_corpus(corpus, out_path: str | None, provenance_path: str | None) -> None:
    triplet_rows, provenance_rows = corpus_to_records(corpus)
    _write_out(out_path, triplet_rows)
    if provenance_path:
        write_records(provenance_path, provenance_rows)


def _trajectories_from_rows(rows: list[dict]) -> tuple[list[Trajectory], list[str]]:
    trajectories: list[Trajectory] = []
    origin_ids: list[str] = []
    dropped = 0
    for i, row in enumerate(rows):
        try:
            trajectories.append(trajectory_from_record(row))
        except (ChainError, KeyError, TypeError, ValueError):
            dropped += 1
            continue
        origin_ids.append(str(row.get("id", f"t{i:06d}")))
    if dropped:
        total = len(rows)
        if dropped / total > MALFORMED_BUDGET:
            raise _DataError(
                f"{dropped} of {total} trajectory records malformed "
                f"(> {MALFORMED_BUDGET:.0%} budget)"
            )
        click.echo(f"warning: dropped {dropped} malformed trajectory record(s)", err=True)
    return trajectories, origin_ids


@pipeline.command("build-seed")
@click.option("--in", "in_path", required=True, help="Gold trajectory JSONL.")
@click.option("--out", "out_path", default=None, help="Triplet JSONL (default stdout).")
@click.option("--provenance", "provenance_path", default=None,
              help="Provenance sidecar JSONL.")
@click.option("--backend", "backend_path", required=True)
@click.option("--checkpoint", "checkpoint_path", default=None,
              help="Snapshot file written at iteration boundaries.")
@click.option("--resume", is_flag=True, help="Continue from the checkpoint file.")
@click.option("--max-iterations", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=int, default=None)
def pipeline_build_seed(in_path: str, out_path: str | None, provenance_path: str | None,
                        backend_path: str, checkpoint_path: str | None, resume: bool,
                        max_iterations: int | None, seed: int | None) -> None:
    """Turn gold trajectories into verified reduction triplets."""

    def body() -> int:
        config, hub, _ = _build_runtime(backend_path, seed, need_executor=False)
        pipeline_config = config.pipeline
        if max_iterations is not None:
            pipeline_config = replace(pipeline_config, max_iterations=max_iterations)

        rows = _load_jsonl(in_path, "trajectory")
        if not rows and not (resume and checkpoint_path and Path(checkpoint_path).exists()):
            _write_out(out_path, [])
            return EXIT_OK
        trajectories, origin_ids = _trajectories_from_rows(rows)

        result = build_seed(
            trajectories,
            hub,
            pipeline_config,
            origin_ids=origin_ids,
            checkpoint_path=checkpoint_path,
            resume=resume,
        )
        _write_corpus(result.corpus, out_path, provenance_path)
        stats = result.stats
        click.echo(
            f"built {len(result.corpus)} triplet(s) in {stats.iterations} iteration(s): "
            f"{stats.finals} final, {stats.reduces} reduce; dropped "
            f"{stats.dropped_annotator} annotator / {stats.dropped_verifier} verifier; "
            f"{stats.tail_dropped} tail(s) not shortened; "
            f"{len(result.leftover)} trajectory(ies) unfinished",
            err=True,
        )
        for row in stats.per_iteration:
            click.echo(
                f"  iteration {row.iteration}: processed {row.processed}, "
                f"reduced {row.reduced}, drained {row.drained_finals} final(s), "
                f"dropped {row.dropped_annotator + row.dropped_verifier}",
                err=True,
            )
        return EXIT_OK if not result.leftover else EXIT_RUNTIME

    _guard(body)


@pipeline.command("self-distill")
@click.option("--pairs", "pairs_path", required=True,
              help="JSONL of {question, answer} pairs.")
@click.option("--out", "out_path", default=None, help="Triplet JSONL (default stdout).")
@click.option("--provenance", "provenance_path", default=None)
@click.option("--records", "records_path", default=None,
              help="Also write every raw solving record here.")
@click.option("--backend", "backend_path", required=True)
@click.option("--seed", type=int, default=None)
def pipeline_self_distill(pairs_path: str, out_path: str | None,
                          provenance_path: str | None, records_path: str | None,
                          backend_path: str, seed: int | None) -> None:
    """Solve known-answer questions and keep answer-verified chains."""

    def body() -> int:
        config, hub, executor = _build_runtime(backend_path, seed, need_executor=True)
        rows = _load_jsonl(pairs_path, "pair")
        pairs: list[tuple[str, str]] = []
        origin_ids: list[str] = []
        skipped = 0
        for i, row in enumerate(rows):
            question, answer = row.get("question"), row.get("answer")
            if isinstance(question, str) and isinstance(answer, str) and question.strip():
                pairs.append((question, answer))
                origin_ids.append(str(row.get("id", f"d{i:06d}")))
            else:
                skipped += 1
        if skipped:
            click.echo(f"warning: skipped {skipped} unusable pair record(s)", err=True)
        if not pairs:
            _write_out(out_path, [])
            return EXIT_OK

        raw_records: list[dict] = []
        corpus, stats = self_distill(
            pairs, hub, executor,
            solve_config=config.solve,
            tolerance=config.pipeline.tolerance,
            origin_ids=origin_ids,
            on_record=(lambda record: raw_records.append(run_record_to_record(record)))
            if records_path else None,
        )
        _write_corpus(corpus, out_path, provenance_path)
        if records_path:
            write_records(records_path, raw_records)
        click.echo(
            f"kept {len(corpus)} triplet(s) from {stats.verified} verified chain(s); "
            f"{stats.attempted} attempted, {stats.solved} solved, "
            f"{stats.rejected_answer} wrong answer, {stats.failed} failed",
            err=True,
        )
        return EXIT_OK

    _guard(body)


@pipeline.command("dedup")
@click.option("--in", "in_paths", multiple=True, required=True,
              help="Triplet JSONL file; repeatable.")
@click.option("--provenance-in", "provenance_in", multiple=True,
              help="Provenance sidecars aligned with --in, by position.")
@click.option("--out", "out_path", default=None, help="Merged triplet JSONL.")
@click.option("--provenance", "provenance_path", default=None)
def pipeline_dedup(in_paths: tuple[str, ...], provenance_in: tuple[str, ...],
                   out_path: str | None, provenance_path: str | None) -> None:
    """Merge corpora, dropping triplets with identical content."""

    def body() -> int:
        if provenance_in and len(provenance_in) != len(in_paths):
            raise _DataError("--provenance-in must be given once per --in")
        corpora = []
        total_in = 0
        for i, path in enumerate(in_paths):
            rows = _load_jsonl(path, "triplet")
            prov_rows = None
            if provenance_in:
                prov_rows = _load_jsonl(provenance_in[i], "provenance")
            try:
                corpus = corpus_from_records(rows, prov_rows)
            except (ChainError, KeyError, TypeError, ValueError) as exc:
                raise _DataError(f"{path}: bad triplet record: {exc}") from exc
            total_in += len(rows)
            corpora.append(corpus)
        merged = filter_dedup(corpora)
        _write_corpus(merged, out_path, provenance_path)
        click.echo(f"kept {len(merged)} of {total_in} triplet(s)", err=True)
        return EXIT_OK

    _guard(body)


# -- bench -------------------------------------------------------------------


def _params_from_file(path: str, profile) -> CostModelParams:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise _DataError(f"cannot read params file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise _DataError(f"{path}: bad JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise _DataError(f"{path}: expected an object")
    try:
        base_cost = float(data.get("base_cost", 0.0))
        attn = data.get("attn_cost_per_context_token")
        calibrate = data.get("calibrate")
        if calibrate is not None:
            if profile is None:
                raise _DataError("calibration needs a step profile")
            reference = step_mean_decode_context(
                calibrate.get("strategy", MSR_STRATEGY),
                profile,
                int(calibrate["step"]),
            )
            attn = calibrate_attn_cost(
                float(calibrate["target_seconds_per_token"]), reference, base_cost
            )
        return CostModelParams(
            layers=int(data["layers"]),
            kv_heads=int(data["kv_heads"]),
            head_dim=int(data["head_dim"]),
            bytes_per_element=int(data.get("bytes_per_element", 2)),
            base_cost=base_cost,
            attn_cost_per_context_token=float(attn or 0.0),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise _DataError(f"{path}: {exc}") from exc


def _write_step_csv(path: Path, report) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step_index", "prompt_tokens", "completion_tokens",
             "decode_time", "exec_time", "modeled_cache_bytes"]
        )
        for t in report.per_step:
            writer.writerow(
                [t.step_index, t.prompt_tokens, t.completion_tokens,
                 t.decode_time, t.exec_time, t.modeled_cache_bytes]
            )


def _write_comparison_csv(path: Path, table) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "runs", "mean_E", "mean_peak_cache_bytes", "accuracy"])
        for row in table.rows():
            writer.writerow(
                [row["label"], row["runs"], row["mean_E"],
                 row["mean_peak_cache_bytes"], row["accuracy"]]
            )


@main.command()
@click.option("--profile", "profile_path", default=None,
              help="Step token profile JSON; enables the modeled bench.")
@click.option("--live", "live_backend", default=None,
              help="Run configuration; solves --questions live and measures.")
@click.option("--params", "params_path", default=None,
              help="Cost model parameter JSON.")
@click.option("--questions", "questions_path", default=None,
              help="Question JSONL for --live runs.")
@click.option("--strategy", type=click.Choice([MCOT_STRATEGY, MSR_STRATEGY, "both"]),
              default="both", show_default=True)
@click.option("--out-dir", "out_dir", default=".", show_default=True)
@click.option("--seed", type=int, default=None)
def bench(profile_path: str | None, live_backend: str | None,
          params_path: str | None, questions_path: str | None,
          strategy: str, out_dir: str, seed: int | None) -> None:
    """Produce efficiency reports, modeled from a profile or measured live."""

    def body() -> int:
        if (profile_path is None) == (live_backend is None):
            raise _DataError("exactly one of --profile or --live is required")
        strategies = [MCOT_STRATEGY, MSR_STRATEGY] if strategy == "both" else [strategy]
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        reports = []

        if profile_path is not None:
            if params_path is None:
                raise _DataError("--profile needs --params")
            try:
                profile = profile_from_json(Path(profile_path).read_text(encoding="utf-8"))
            except OSError as exc:
                raise _DataError(f"cannot read profile file {profile_path}: {exc}") from exc
            except ValueError as exc:
                raise _DataError(f"{profile_path}: {exc}") from exc
            params = _params_from_file(params_path, profile)
            for s in strategies:
                reports.append(model_run_cost(s, profile, params))
        else:
            if questions_path is None:
                raise _DataError("--live needs --questions")
            config, hub, executor = _build_runtime(live_backend, seed, need_executor=True)
            solve_config = config.solve
            if params_path is not None:
                params = _params_from_file(params_path, None)
                solve_config = replace(
                    solve_config, cache_bytes_per_token=params.cache_bytes_per_token
                )
            rows = _load_jsonl(questions_path, "question")
            questions = [r["question"] for r in rows
                         if isinstance(r.get("question"), str)]
            if not questions:
                _write_out(None, [])
                return EXIT_OK
            for s in strategies:
                records = [run_solve(s, q, hub, executor, solve_config) for q in questions]
                reports.append(measured_report(records, token_counting="as-recorded"))

        write_records(out / "reports.jsonl", [report_to_record(r) for r in reports])
        for report in reports:
            _write_step_csv(out / f"steps_{report.strategy}.csv", report)
        if len(reports) == 2:
            a, b = reports
            with open(out / "comparison.csv", "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["metric", a.strategy, b.strategy, f"{b.strategy}/{a.strategy}"])
                writer.writerow(["E", a.E, b.E, b.E / a.E if a.E else None])
                writer.writerow(
                    ["peak_cache_bytes", a.peak_cache_bytes, b.peak_cache_bytes,
                     b.peak_cache_bytes / a.peak_cache_bytes if a.peak_cache_bytes else None]
                )
                writer.writerow(
                    ["total_time", a.total_time, b.total_time,
                     b.total_time / a.total_time if a.total_time else None]
                )
        click.echo(
            "; ".join(f"{r.strategy}: E={r.E:.6g} s/token" for r in reports), err=True
        )
        return EXIT_OK

    _guard(body)


# -- compare and report --------------------------------------------------------


def _load_run_records(path: str) -> list[RunRecord]:
    rows = _load_jsonl(path, "run record")
    records = []
    for row in rows:
        try:
            records.append(run_record_from_record(row))
        except (ChainError, KeyError, TypeError, ValueError) as exc:
            raise _DataError(f"{path}: bad run record: {exc}") from exc
    return records


@main.command()
@click.argument("records_a")
@click.argument("records_b")
@click.option("--gold", "gold_path", default=None,
              help="JSONL of {question, answer} gold labels.")
@click.option("--label-a", default=None, help="Row label for the first file.")
@click.option("--label-b", default=None, help="Row label for the second file.")
@click.option("--out", "out_path", default=None, help="Table JSON (default stdout).")
def compare(records_a: str, records_b: str, gold_path: str | None,
            label_a: str | None, label_b: str | None, out_path: str | None) -> None:
    """Compare two run record files over the same question set."""

    def body() -> int:
        a = _load_run_records(records_a)
        b = _load_run_records(records_b)
        gold = None
        if gold_path:
            gold = {}
            for row in _load_jsonl(gold_path, "gold"):
                if isinstance(row.get("question"), str) and isinstance(row.get("answer"), str):
                    gold[row["question"]] = row["answer"]
        la = label_a or (a[0].strategy if a else "a")
        lb = label_b or (b[0].strategy if b else "b")
        table = compare_records(a, b, gold=gold, labels=(la, lb))
        payload = json.dumps({"rows": table.rows()}, sort_keys=True, indent=2)
        if out_path:
            Path(out_path).write_text(payload + "\n", encoding="utf-8")
        else:
            click.echo(payload)
        return EXIT_OK

    _guard(body)


@main.command()
@click.option("--in", "in_path", required=True, help="Run record JSONL.")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
def report(in_path: str, as_json: bool) -> None:
    """Summarize a run record file."""

    def body() -> int:
        records = _load_run_records(in_path)
        by_strategy: dict[str, list[RunRecord]] = {}
        for record in records:
            by_strategy.setdefault(record.strategy, []).append(record)
        summary = []
        for name in sorted(by_strategy):
            group = by_strategy[name]
            stops: dict[str, int] = {}
            for record in group:
                stops[record.stop_reason.value] = stops.get(record.stop_reason.value, 0) + 1
            with_telemetry = [r for r in group if r.telemetry]
            es = [metric_E(r.telemetry) for r in with_telemetry]
            summary.append(
                {
                    "strategy": name,
                    "runs": len(group),
                    "solved": sum(1 for r in group if r.solved),
                    "stop_reasons": dict(sorted(stops.items())),
                    "mean_E": (sum(es) / len(es)) if es else None,
                    "mean_steps": (
                        sum(len(r.telemetry) for r in with_telemetry) / len(with_telemetry)
                    ) if with_telemetry else None,
                }
            )
        if as_json:
            click.echo(json.dumps({"groups": summary}, sort_keys=True, indent=2))
        else:
            for group in summary:
                click.echo(
                    f"{group['strategy']}: {group['runs']} run(s), "
                    f"{group['solved']} solved, mean steps "
                    f"{group['mean_steps'] if group['mean_steps'] is not None else 'n/a'}, "
                    f"mean E {group['mean_E'] if group['mean_E'] is not None else 'n/a'}"
                )
                for reason, count in group["stop_reasons"].items():
                    click.echo(f"  {reason}: {count}")
        return EXIT_OK

    _guard(body)


if __name__ == "__main__":
    main()
