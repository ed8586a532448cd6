"""Multi-agent rubric-centric grading for notebook submissions."""

from .notebook import Cell, CellOutput, Notebook, SubmissionDigest, extract_artifacts, parse_notebook
from .rubric import (
    InterpretedRubric,
    RubricItem,
    RubricSpec,
    VerdictBits,
    load_rubric,
    parse_score_string,
    render_score_string,
    validate_interpretation,
)
from .backend import (
    BackendConfig,
    ChatMessage,
    CompletionResult,
    ContentPart,
    FunctionBackend,
    LiveBackend,
    RecordingBackend,
    ReplayBackend,
    fingerprint,
    load_tape,
    save_tape,
)
from .agents import (
    FinalVerdict,
    MetaReport,
    StreamVerdict,
    SummaryRecord,
    load_roles,
    render_prompt,
    sli_evaluate,
)
from .orchestrator import GradeResult, PipelineOptions, Transcript, run_batch, run_pipeline
from .harness import (
    EvalSample,
    MetricsReport,
    aggregate_rounds,
    judge_feedback,
    rubric_accuracy,
    run_experiment,
)

__version__ = "0.1.0"
