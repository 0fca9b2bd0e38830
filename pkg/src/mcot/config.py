"""TOML run configuration.

One file wires the three model roles, the code executor, and the solve
and dataset knobs.  Relative paths inside the file resolve against the
file's own directory so a config travels with its fixtures.  Secrets
never appear in the file; HTTP backends name an environment variable
that holds the key.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backend import (
    Backend,
    BackendHub,
    BackendRole,
    HTTPBackend,
    MockBackend,
)
from .chain import ExecStatus, ExecutionResult
from .executor import (
    DEFAULT_OUTPUT_CAP_BYTES,
    DEFAULT_POOL_SIZE,
    DEFAULT_TIMEOUT_S,
    Executor,
    ExecutorConfigError,
    ScriptedExecutor,
    ScriptedResult,
    SubprocessExecutor,
)
from .pipeline import PipelineConfig
from .prompt_templates import load_template_file
from .reasoners import SolveConfig


class ConfigError(Exception):
    """The configuration file is missing, malformed, or inconsistent."""


_BACKEND_KINDS = ("mock", "http")
_EXECUTOR_KINDS = ("subprocess", "scripted", "none")


@dataclass(frozen=True)
class BackendSpec:
    kind: str
    script: Path | None = None
    base_url: str | None = None
    model: str | None = None
    api_key_env: str | None = None
    timeout_s: float = 60.0
    max_retries: int = 2


@dataclass(frozen=True)
class ExecutorSpec:
    kind: str = "none"
    command: tuple[str, ...] = ()
    script: Path | None = None
    pool_size: int = DEFAULT_POOL_SIZE
    timeout_s: float = DEFAULT_TIMEOUT_S
    output_cap_bytes: int = DEFAULT_OUTPUT_CAP_BYTES
    allow_network: bool = False


@dataclass(frozen=True)
class AppConfig:
    seed: int = 0
    backends: dict[BackendRole, BackendSpec] = field(default_factory=dict)
    executor: ExecutorSpec = ExecutorSpec()
    solve: SolveConfig = SolveConfig()
    pipeline: PipelineConfig = PipelineConfig()

    def build_hub(self, seed: int | None = None) -> BackendHub:
        effective_seed = self.seed if seed is None else seed
        built: dict[BackendRole, Backend] = {}
        for role, spec in self.backends.items():
            built[role] = _build_backend(role, spec, effective_seed)
        return BackendHub(built)

    def build_executor(self) -> Executor:
        spec = self.executor
        if spec.kind == "scripted":
            if spec.script is None:
                raise ConfigError("scripted executor needs a script path")
            return ScriptedExecutor(scripted_results_from_jsonl(spec.script))
        if spec.kind == "subprocess":
            if not spec.command:
                raise ConfigError("subprocess executor needs a command")
            return SubprocessExecutor(
                list(spec.command),
                pool_size=spec.pool_size,
                timeout_s=spec.timeout_s,
                output_cap_bytes=spec.output_cap_bytes,
                allow_network=spec.allow_network,
            )
        raise ConfigError("no executor configured")


def _build_backend(role: BackendRole, spec: BackendSpec, seed: int) -> Backend:
    if spec.kind == "mock":
        if spec.script is None:
            raise ConfigError(f"{role.value}: mock backend needs a script path")
        try:
            return MockBackend.from_script(str(spec.script), seed=seed)
        except OSError as exc:
            raise ConfigError(f"{role.value}: cannot read mock script: {exc}") from exc
    if spec.kind == "http":
        if not spec.base_url or not spec.model:
            raise ConfigError(f"{role.value}: http backend needs base_url and model")
        return HTTPBackend(
            base_url=spec.base_url,
            model=spec.model,
            api_key_env=spec.api_key_env,
            timeout=spec.timeout_s,
            max_retries=spec.max_retries,
        )
    raise ConfigError(f"{role.value}: unknown backend kind {spec.kind!r}")


def scripted_results_from_jsonl(path: Path | str) -> list[ScriptedResult]:
    """Executor replay rules: {match, status, stdout, stderr, wall_time_s}."""
    rules: list[ScriptedResult] = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ExecutorConfigError(f"{path}:{lineno}: bad JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise ExecutorConfigError(f"{path}:{lineno}: expected an object")
        try:
            status = ExecStatus(obj.get("status", "ok"))
        except ValueError as exc:
            raise ExecutorConfigError(f"{path}:{lineno}: bad status") from exc
        rules.append(
            ScriptedResult(
                match=str(obj.get("match", "")),
                result=ExecutionResult(
                    status=status,
                    stdout=str(obj.get("stdout", "")),
                    stderr=str(obj.get("stderr", "")),
                    wall_time=float(obj.get("wall_time_s", 0.0)),
                ),
            )
        )
    return rules


def _require_table(obj: object, where: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected a table")
    return obj


def _backend_spec(table: dict, where: str, base_dir: Path) -> BackendSpec:
    kind = table.get("kind", "mock")
    if kind not in _BACKEND_KINDS:
        raise ConfigError(f"{where}: unknown backend kind {kind!r}")
    script = table.get("script")
    http = table.get("http", {})
    _require_table(http, f"{where}.http")
    return BackendSpec(
        kind=kind,
        script=_resolve(base_dir, script) if script else None,
        base_url=http.get("base_url"),
        model=http.get("model"),
        api_key_env=http.get("api_key_env"),
        timeout_s=float(http.get("timeout_s", 60.0)),
        max_retries=int(http.get("max_retries", 2)),
    )


def _resolve(base_dir: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base_dir / path


def load_config(path: Path | str, seed_override: int | None = None) -> AppConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base_dir = path.parent

    seed = int(data.get("seed", 0)) if seed_override is None else seed_override

    backends: dict[BackendRole, BackendSpec] = {}
    backends_table = _require_table(data.get("backends", {}), "backends")
    for key, value in backends_table.items():
        try:
            role = BackendRole(key)
        except ValueError as exc:
            raise ConfigError(f"backends.{key}: unknown role") from exc
        backends[role] = _backend_spec(_require_table(value, f"backends.{key}"), f"backends.{key}", base_dir)

    executor_table = _require_table(data.get("executor", {}), "executor")
    executor_kind = executor_table.get("kind", "none")
    if executor_kind not in _EXECUTOR_KINDS:
        raise ConfigError(f"executor: unknown kind {executor_kind!r}")
    command = executor_table.get("command", ())
    if command and (
        not isinstance(command, list) or not all(isinstance(c, str) for c in command)
    ):
        raise ConfigError("executor.command: expected a list of strings")
    script = executor_table.get("script")
    executor = ExecutorSpec(
        kind=executor_kind,
        command=tuple(command),
        script=_resolve(base_dir, script) if script else None,
        pool_size=int(executor_table.get("pool_size", DEFAULT_POOL_SIZE)),
        timeout_s=float(executor_table.get("timeout_s", DEFAULT_TIMEOUT_S)),
        output_cap_bytes=int(executor_table.get("output_cap_bytes", DEFAULT_OUTPUT_CAP_BYTES)),
        allow_network=bool(executor_table.get("allow_network", False)),
    )

    templates_table = _require_table(data.get("templates", {}), "templates")
    step_template = None
    full_template = None
    annotator_header = None
    if "solver_step" in templates_table:
        step_template = load_template_file(_resolve(base_dir, templates_table["solver_step"]))
    if "solver_full" in templates_table:
        full_template = load_template_file(_resolve(base_dir, templates_table["solver_full"]))
    if "annotator" in templates_table:
        annotator_header = load_template_file(_resolve(base_dir, templates_table["annotator"]))

    solve_table = _require_table(data.get("solve", {}), "solve")
    try:
        solve = SolveConfig(
            max_steps=int(solve_table.get("max_steps", 8)),
            max_new_tokens=int(solve_table.get("max_new_tokens", 1024)),
            temperature=float(solve_table.get("temperature", 0.0)),
            step_template=step_template,
            full_template=full_template,
        )
    except ValueError as exc:
        raise ConfigError(f"solve: {exc}") from exc

    pipeline_table = _require_table(data.get("pipeline", {}), "pipeline")
    try:
        pipeline = PipelineConfig(
            verifier_samples=int(
                pipeline_table.get("verifier_samples", PipelineConfig.verifier_samples)
            ),
            verifier_temperature=float(
                pipeline_table.get("verifier_temperature", PipelineConfig.verifier_temperature)
            ),
            tolerance=float(pipeline_table.get("tolerance", PipelineConfig.tolerance)),
            max_iterations=int(
                pipeline_table.get("max_iterations", PipelineConfig.max_iterations)
            ),
            annotator_header=annotator_header,
            verifier_header=full_template,
        )
    except ValueError as exc:
        raise ConfigError(f"pipeline: {exc}") from exc

    config = AppConfig(
        seed=seed,
        backends=backends,
        executor=executor,
        solve=solve,
        pipeline=pipeline,
    )
    return config


def with_seed(config: AppConfig, seed: int) -> AppConfig:
    return replace(config, seed=seed)
