"""Pipeline execution: interpret -> analyze -> three streams -> meta -> judge -> summarize.

The three evaluation streams (execution+result, visualization, interpretation)
may run concurrently; entries are assembled into the transcript in canonical
stage order so concurrency never changes the persisted bytes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import agents
from .agents import (
    FinalVerdict,
    MetaFlag,
    MetaReport,
    StreamVerdict,
    SummaryRecord,
    format_outputs,
    format_rubric,
    parse_final_verdict,
    parse_meta_report,
    parse_stream_verdict,
    parse_summary,
    repair_messages,
    render_prompt,
)
from .backend import ChatMessage, CompletionResult
from .errors import PipelineError, SchemaViolation, UnparseableVerdict
from .notebook import Notebook, extract_artifacts
from .rubric import (
    InterpretedItem,
    InterpretedRubric,
    RubricSpec,
    render_score_string,
    validate_interpretation,
)

STAGE_ORDER = (
    "interpret",
    "analyze",
    "stream:execution",
    "stream:result",
    "stream:visualization",
    "stream:interpretation",
    "meta",
    "judge",
    "summarize",
)

# evaluators that receive notebook images when image handling is multimodal
_MULTIMODAL_ROLES = {"execution_evaluator", "visualization_evaluator", "interpretation_evaluator"}


@dataclass(frozen=True)
class PipelineOptions:
    image_mode: str = "text"  # multimodal | text
    parallel_streams: bool = True
    repair_retries: int = 1
    transcript_dir: str | Path | None = None
    prompt_dir: str | Path | None = None
    deterministic: bool = False  # freeze timestamps for replay runs
    run_id: str | None = None

    def __post_init__(self):
        if self.image_mode not in ("multimodal", "text"):
            raise ValueError(f"unknown image mode {self.image_mode!r}")


@dataclass(frozen=True)
class TranscriptEntry:
    stage: str
    agent: str
    messages: tuple[ChatMessage, ...]
    response: str | None
    error: str | None = None


@dataclass
class Transcript:
    run_id: str
    started: float
    finished: float | None = None
    entries: list[TranscriptEntry] = field(default_factory=list)


@dataclass(frozen=True)
class GradeResult:
    summary: SummaryRecord
    final: FinalVerdict
    streams: tuple[StreamVerdict, ...]
    meta: MetaReport
    interpreted: InterpretedRubric
    transcript_ref: str

    def __post_init__(self):
        if self.summary.score_string != render_score_string(self.final.bits):
            raise SchemaViolation("summary score contradicts the final verdict")
        if tuple(v.stream for v in self.streams) != agents.STREAMS:
            raise SchemaViolation("expected exactly one verdict per stream")


def _derive_run_id(nb: Notebook, rubric: RubricSpec, tag: str) -> str:
    h = hashlib.sha256(f"{nb.source_id}|{rubric.task_id}|{tag}".encode())
    return h.hexdigest()[:16]


def _fallback_interpretation(rubric: RubricSpec) -> InterpretedRubric:
    return InterpretedRubric(
        entries=tuple(
            InterpretedItem(
                final_objective=item.description,
                evidence_types=(item.evidence_hint or "any supporting evidence",),
            )
            for item in rubric.items
        )
    )


def _interpretation_text(interp: InterpretedRubric) -> str:
    return json.dumps(
        {"rubrics": [dataclasses.asdict(e) for e in interp.entries]}, indent=2
    )


def _verdict_text(v: StreamVerdict) -> str:
    return json.dumps(
        {
            "stream": v.stream,
            "status": v.status,
            "justification": v.justification,
            "evidence_cells": list(v.evidence_cells),
        }
    )


class _Run:
    """State for one pipeline execution; entries buffered per stage."""

    def __init__(self, nb, rubric, backend, opts: PipelineOptions, tag: str = ""):
        self.nb = nb
        self.rubric = rubric
        self.backend = backend
        self.opts = opts
        self.roles = agents.load_roles(opts.prompt_dir)
        self.run_id = opts.run_id or _derive_run_id(nb, rubric, tag)
        self.buffers: dict[str, list[TranscriptEntry]] = {s: [] for s in STAGE_ORDER}
        self.started = 0.0 if opts.deterministic else time.time()

    def _now(self) -> float:
        return 0.0 if self.opts.deterministic else time.time()

    def call(self, stage: str, role_id: str, context: dict, images=()) -> str:
        messages = render_prompt(self.roles[role_id], context, images=images)
        try:
            result = self.backend.complete(messages)
        except Exception as exc:
            self.buffers[stage].append(
                TranscriptEntry(stage, role_id, tuple(messages), None, error=str(exc))
            )
            raise PipelineError(stage, self.run_id, exc) from exc
        self.buffers[stage].append(TranscriptEntry(stage, role_id, tuple(messages), result.text))
        return result.text

    def call_parsed(self, stage: str, role_id: str, context: dict, parser, images=()):
        """One call plus up to repair_retries repair rounds on parse failure."""
        messages = render_prompt(self.roles[role_id], context, images=images)
        response = self._complete(stage, role_id, messages)
        budget = self.opts.repair_retries
        while True:
            try:
                return parser(response)
            except (UnparseableVerdict, SchemaViolation) as exc:
                if budget <= 0:
                    raise PipelineError(stage, self.run_id, exc) from exc
                budget -= 1
                messages = repair_messages(messages, response)
                response = self._complete(stage, role_id, messages)

    def _complete(self, stage: str, role_id: str, messages) -> str:
        try:
            result = self.backend.complete(messages)
        except Exception as exc:
            self.buffers[stage].append(
                TranscriptEntry(stage, role_id, tuple(messages), None, error=str(exc))
            )
            raise PipelineError(stage, self.run_id, exc) from exc
        self.buffers[stage].append(TranscriptEntry(stage, role_id, tuple(messages), result.text))
        return result.text

    def transcript(self) -> Transcript:
        t = Transcript(run_id=self.run_id, started=self.started, finished=self._now())
        for stage in STAGE_ORDER:
            t.entries.extend(self.buffers[stage])
        return t


def run_pipeline(
    nb: Notebook,
    rubric: RubricSpec,
    backend,
    opts: PipelineOptions | None = None,
    run_tag: str = "",
) -> GradeResult:
    """Grade one notebook against one rubric through the full agent pipeline."""
    opts = opts or PipelineOptions()
    run = _Run(nb, rubric, backend, opts, tag=run_tag)
    try:
        result = _execute(run)
    finally:
        if opts.transcript_dir is not None:
            persist_transcript(run.transcript(), opts.transcript_dir)
    return result


def _execute(run: _Run) -> GradeResult:
    opts = run.opts
    rubric = run.rubric
    digest = extract_artifacts(run.nb)
    k = str(rubric.k)
    rubric_text = format_rubric(rubric)
    outputs_text = format_outputs(digest)
    images = (
        tuple((mt, payload) for _i, mt, payload in digest.images)
        if opts.image_mode == "multimodal"
        else ()
    )
    extra_flags: list[MetaFlag] = []

    # stage 1: rubric interpretation, degrading to the raw rubric on failure
    try:
        interpreted = run.call_parsed(
            "interpret",
            "rubric_interpreter",
            {"rubric": rubric_text, "k": k},
            lambda raw: validate_interpretation(rubric, _payload_of(raw)),
        )
    except PipelineError as exc:
        if not isinstance(exc.cause, (SchemaViolation, UnparseableVerdict)):
            raise
        interpreted = _fallback_interpretation(rubric)
        extra_flags.append(
            MetaFlag(
                kind="misalignment",
                streams=agents.STREAMS,
                note="rubric interpretation failed after repair; using raw rubric descriptions",
            )
        )
    interp_text = _interpretation_text(interpreted)

    # stage 2: holistic submission analysis (free text)
    findings = run.call(
        "analyze",
        "submission_analyzer",
        {
            "interpreted_rubric": interp_text,
            "digest_code": digest.code_text,
            "digest_markdown": digest.markdown_text,
            "digest_outputs": outputs_text,
            "k": k,
        },
    )

    # stage 3: three evaluation streams (execution+result sequential)
    def run_execution_stream() -> tuple[StreamVerdict, StreamVerdict]:
        execution = run.call_parsed(
            "stream:execution",
            "execution_evaluator",
            {
                "interpreted_rubric": interp_text,
                "upstream_findings": findings,
                "digest_code": digest.code_text,
                "digest_outputs": outputs_text,
                "k": k,
            },
            lambda raw: parse_stream_verdict(raw, "execution"),
            images=images,
        )
        result_findings = f"{findings}\n\nExecution verdict:\n{_verdict_text(execution)}"
        must_abstain = execution.status == "fail"
        if must_abstain:
            result_findings += (
                "\n\nDirective: execution failed, so there is no measurable result."
                " You must abstain from judgment."
            )

        def parse_result(raw: str) -> StreamVerdict:
            verdict = parse_stream_verdict(raw, "result")
            if must_abstain and verdict.status != "abstain":
                raise UnparseableVerdict(
                    "result evaluator was directed to abstain but judged anyway"
                )
            return verdict

        result = run.call_parsed(
            "stream:result",
            "result_evaluator",
            {
                "interpreted_rubric": interp_text,
                "upstream_findings": result_findings,
                "digest_outputs": outputs_text,
                "k": k,
            },
            parse_result,
        )
        return execution, result

    def run_simple_stream(stage: str, role_id: str, stream: str, context: dict) -> StreamVerdict:
        return run.call_parsed(
            stage,
            role_id,
            context,
            lambda raw: parse_stream_verdict(raw, stream),
            images=images if role_id in _MULTIMODAL_ROLES else (),
        )

    viz_context = {
        "interpreted_rubric": interp_text,
        "upstream_findings": findings,
        "digest_outputs": outputs_text,
        "k": k,
    }
    interp_context = {
        "interpreted_rubric": interp_text,
        "upstream_findings": findings,
        "digest_markdown": digest.markdown_text,
        "k": k,
    }
    if opts.parallel_streams:
        with ThreadPoolExecutor(max_workers=3) as pool:
            exec_future = pool.submit(run_execution_stream)
            viz_future = pool.submit(
                run_simple_stream,
                "stream:visualization",
                "visualization_evaluator",
                "visualization",
                viz_context,
            )
            reason_future = pool.submit(
                run_simple_stream,
                "stream:interpretation",
                "interpretation_evaluator",
                "interpretation",
                interp_context,
            )
            execution, result = exec_future.result()
            visualization = viz_future.result()
            interpretation = reason_future.result()
    else:
        execution, result = run_execution_stream()
        visualization = run_simple_stream(
            "stream:visualization", "visualization_evaluator", "visualization", viz_context
        )
        interpretation = run_simple_stream(
            "stream:interpretation", "interpretation_evaluator", "interpretation", interp_context
        )

    streams = (execution, result, visualization, interpretation)

    # stage 4: cross-stream consistency check
    stream_block = "\n".join(_verdict_text(v) for v in streams)
    meta = run.call_parsed(
        "meta",
        "meta_evaluator",
        {"interpreted_rubric": interp_text, "upstream_findings": stream_block, "k": k},
        parse_meta_report,
    )
    if extra_flags:
        meta = replace(meta, flags=tuple(extra_flags) + meta.flags)

    # stage 5: final judgment; meta overrides are advisory context only
    abstained = [v.stream for v in streams if v.status == "abstain"]
    judge_findings = stream_block
    if meta.flags or meta.suggested_overrides:
        judge_findings += "\n\nMeta review (advisory):\n" + json.dumps(
            {
                "flags": [dataclasses.asdict(f) for f in meta.flags],
                "suggested_overrides": [list(o) for o in meta.suggested_overrides],
            }
        )
    if abstained:
        judge_findings += f"\n\nStreams that abstained from judgment: {', '.join(abstained)}"
    final = run.call_parsed(
        "judge",
        "final_judge",
        {
            "rubric": rubric_text,
            "interpreted_rubric": interp_text,
            "upstream_findings": judge_findings,
            "k": k,
        },
        lambda raw: parse_final_verdict(raw, rubric.k),
    )

    # stage 6: learner-facing summary; judge's bits always win
    judge_score = render_score_string(final.bits)
    summary_findings = (
        f"Score: {judge_score}\nFeedback: {final.feedback}\n"
        f"Strengths: {json.dumps(list(final.strengths))}\n"
        f"Weaknesses: {json.dumps(list(final.weaknesses))}"
    )

    def parse_matching_summary(raw: str) -> SummaryRecord:
        summary = parse_summary(raw, rubric.k)
        if summary.score_string != judge_score:
            raise UnparseableVerdict(
                f"summarizer score {summary.score_string} contradicts judge {judge_score}"
            )
        return summary

    try:
        summary = run.call_parsed(
            "summarize",
            "summarizer",
            {"upstream_findings": summary_findings, "k": k},
            parse_matching_summary,
        )
    except PipelineError as exc:
        if not isinstance(exc.cause, (UnparseableVerdict, SchemaViolation)):
            raise
        # persistent disagreement: salvage the summary text, force judge bits
        last = run.buffers["summarize"][-1]
        salvaged = None
        if last.response is not None:
            try:
                salvaged = parse_summary(last.response, rubric.k)
            except (UnparseableVerdict, SchemaViolation):
                salvaged = None
        if salvaged is None:
            raise
        summary = replace(salvaged, score_string=judge_score)
        meta = replace(
            meta,
            flags=meta.flags
            + (
                MetaFlag(
                    kind="contradiction",
                    streams=agents.STREAMS,
                    note=(
                        f"summarizer emitted {salvaged.score_string} against judge"
                        f" {judge_score}; judge bits retained"
                    ),
                ),
            ),
        )

    return GradeResult(
        summary=summary,
        final=final,
        streams=streams,
        meta=meta,
        interpreted=interpreted,
        transcript_ref=run.run_id,
    )


def _payload_of(raw: str) -> dict:
    doc = agents._extract_json_block(raw)
    if doc is None:
        raise SchemaViolation("no JSON payload in interpreter response")
    return doc


def run_batch(
    items: Sequence[tuple[Notebook, RubricSpec]],
    backend,
    opts: PipelineOptions | None = None,
    worker_limit: int = 4,
):
    """Grade many submissions; results in input order, failures isolated.

    Each slot holds a GradeResult or the PipelineError that sank it.
    """
    if worker_limit < 1:
        raise ValueError("worker_limit must be >= 1")
    opts = opts or PipelineOptions()

    def one(position: int, nb: Notebook, rubric: RubricSpec):
        item_opts = opts if opts.run_id is None else replace(opts, run_id=f"{opts.run_id}-{position}")
        try:
            return run_pipeline(nb, rubric, backend, item_opts, run_tag=str(position))
        except PipelineError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=worker_limit) as pool:
        futures = [pool.submit(one, i, nb, rb) for i, (nb, rb) in enumerate(items)]
        return [f.result() for f in futures]


# --- transcript persistence -------------------------------------------------

def _message_to_json(msg: ChatMessage, blob_dir: Path | None) -> dict:
    parts = []
    for part in msg.parts:
        if part.kind == "text":
            parts.append({"kind": "text", "text": part.text})
        else:
            digest = hashlib.sha256(part.base64_payload.encode()).hexdigest()
            if blob_dir is not None:
                blob_dir.mkdir(parents=True, exist_ok=True)
                blob = blob_dir / digest
                if not blob.exists():
                    blob.write_text(part.base64_payload, encoding="utf-8")
            parts.append({"kind": "image", "media_type": part.media_type, "digest": digest})
    return {"role": msg.role, "parts": parts}


def persist_transcript(transcript: Transcript, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob_dir = directory / "blobs"
    doc = {
        "run_id": transcript.run_id,
        "started": transcript.started,
        "finished": transcript.finished,
        "entries": [
            {
                "stage": e.stage,
                "agent": e.agent,
                "messages": [_message_to_json(m, blob_dir) for m in e.messages],
                "response": e.response,
                "error": e.error,
            }
            for e in transcript.entries
        ],
    }
    path = directory / f"{transcript.run_id}.json"
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return path


def grade_result_to_dict(result: GradeResult) -> dict:
    return {
        "summary": dataclasses.asdict(result.summary),
        "final": {
            "bits": render_score_string(result.final.bits),
            "feedback": result.final.feedback,
            "strengths": list(result.final.strengths),
            "weaknesses": list(result.final.weaknesses),
        },
        "streams": [dataclasses.asdict(v) for v in result.streams],
        "meta": {
            "flags": [dataclasses.asdict(f) for f in result.meta.flags],
            "suggested_overrides": [list(o) for o in result.meta.suggested_overrides],
        },
        "interpreted": {"rubrics": [dataclasses.asdict(e) for e in result.interpreted.entries]},
        "transcript_ref": result.transcript_ref,
    }
