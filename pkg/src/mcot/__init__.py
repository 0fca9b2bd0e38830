"""Memoryless step-by-step math solving with tool use.

The solver carries a single self-contained question from step to step
instead of an ever-growing transcript, which keeps prompts short and
decode cost flat.  The package also ships the dataset machinery that
turns full worked solutions into per-step training triplets, and a
cost model for comparing the two prompting styles.
"""

from .backend import (
    Backend,
    BackendConfigError,
    BackendError,
    BackendHub,
    BackendRole,
    CompletionRequest,
    CompletionResponse,
    HTTPBackend,
    MockBackend,
    ProtocolError,
    TransportError,
)
from .chain import (
    ChainEntry,
    ChainError,
    ChainStatus,
    ChainStructureError,
    DerivationStep,
    ExecStatus,
    ExecutionResult,
    MarkovChain,
    State,
    Trajectory,
    Transition,
    TransitionKind,
    Triplet,
    decompose_chain,
    reassemble_chain,
    validate_chain,
)
from .effbench import (
    ComparisonTable,
    CostModelParams,
    EfficiencyReport,
    StepBudget,
    UndefinedMetricError,
    compare,
    metric_E,
    model_run_cost,
)
from .executor import ScriptedExecutor, ScriptedResult, SubprocessExecutor
from .pipeline import (
    BuildResult,
    PipelineConfig,
    PipelineError,
    PipelineInterrupted,
    SeedCorpus,
    build_seed,
    dedup_key,
    filter_dedup,
    self_distill,
)
from .reasoners import (
    MCOT_STRATEGY,
    MSR_STRATEGY,
    RunRecord,
    SolveConfig,
    StopReason,
    build_prompt_mcot,
    build_prompt_msr,
    solve,
    solve_mcot,
    solve_msr,
)
from .tagformat import (
    SolutionBlock,
    TagParseError,
    Terminal,
    TerminalKind,
    extract_final_answer,
    parse_document,
    parse_solution,
    render_block,
)
from .verifier import CanonicalAnswer, equivalent, normalize

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "BackendConfigError",
    "BackendError",
    "BackendHub",
    "BackendRole",
    "BuildResult",
    "CanonicalAnswer",
    "ChainEntry",
    "ChainError",
    "ChainStatus",
    "ChainStructureError",
    "ComparisonTable",
    "CompletionRequest",
    "CompletionResponse",
    "CostModelParams",
    "DerivationStep",
    "EfficiencyReport",
    "ExecStatus",
    "ExecutionResult",
    "HTTPBackend",
    "MCOT_STRATEGY",
    "MSR_STRATEGY",
    "MarkovChain",
    "MockBackend",
    "PipelineConfig",
    "PipelineError",
    "PipelineInterrupted",
    "ProtocolError",
    "RunRecord",
    "ScriptedExecutor",
    "ScriptedResult",
    "SeedCorpus",
    "SolutionBlock",
    "SolveConfig",
    "State",
    "StepBudget",
    "StopReason",
    "SubprocessExecutor",
    "TagParseError",
    "Terminal",
    "TerminalKind",
    "Trajectory",
    "Transition",
    "TransitionKind",
    "TransportError",
    "Triplet",
    "UndefinedMetricError",
    "build_prompt_mcot",
    "build_prompt_msr",
    "build_seed",
    "compare",
    "decompose_chain",
    "dedup_key",
    "equivalent",
    "extract_final_answer",
    "filter_dedup",
    "metric_E",
    "model_run_cost",
    "normalize",
    "parse_document",
    "parse_solution",
    "reassemble_chain",
    "render_block",
    "self_distill",
    "solve",
    "solve_mcot",
    "solve_msr",
    "validate_chain",
]
