"""Measurement harness: multi-round rubric accuracy and repeated judge scoring.

Quantitative side: each grading round scores every sample, per-item accuracy
is averaged across samples, and rounds aggregate to mean +/- sample standard
deviation.  Qualitative side: generated feedback is scored 1..5 against an
expert reference along four dimensions, with repeated judge calls averaged.
"""
from __future__ import annotations

import json
import re
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import agents
from .agents import format_outputs, format_rubric, sli_evaluate
from .backend import ChatMessage
from .errors import (
    InsufficientRounds,
    LengthMismatch,
    MalformedDocument,
    NoValidScores,
)
from .notebook import Notebook, extract_artifacts, parse_notebook
from .orchestrator import PipelineOptions, run_pipeline
from .rubric import RubricSpec, VerdictBits, load_rubric, parse_score_string, render_score_string

DIMENSIONS = ("feedback_accuracy", "relevance", "consistency", "coherence")
SYSTEMS = ("agacci", "sli")

_DIMENSION_FOCUS = {
    "feedback_accuracy": (
        "how accurately the feedback reflects the code's purpose, structure, and"
        " logic; penalize vague praise or generic description even when broadly"
        " accurate, and reward technical specificity"
    ),
    "relevance": (
        "how well the feedback aligns with the rubric items; penalize omissions"
        " or misinterpretations of rubric elements, and reward explicit"
        " discussion of rubric satisfaction with justification"
    ),
    "consistency": (
        "whether the feedback maintains a coherent evaluative stance throughout,"
        " without internal contradictions or unjustified shifts in judgment"
    ),
    "coherence": (
        "the structural integrity and conceptual organization of the feedback:"
        " logical progression and integration of ideas rather than a disjointed"
        " list of points"
    ),
}


@dataclass(frozen=True)
class EvalSample:
    sample_id: str
    notebook_ref: str
    rubric_ref: str
    truth_bits: VerdictBits
    reference_feedback: str

    def __post_init__(self):
        if not self.reference_feedback:
            raise MalformedDocument(f"sample {self.sample_id}: empty reference feedback")


@dataclass(frozen=True)
class ItemMetric:
    task: str
    index: int
    description: str
    mean: float
    std: float | None  # None when R < 2


@dataclass(frozen=True)
class MetricsReport:
    system: str  # agacci | sli
    rounds: int
    repeats: int
    items: tuple[ItemMetric, ...]
    overall_mean: float
    overall_std: float | None
    qualitative: dict[str, tuple[float, float | None]]  # dimension -> (mean, std)
    excluded: tuple[str, ...] = ()  # sample ids dropped from some round


def rubric_accuracy(preds: VerdictBits, truth: VerdictBits) -> tuple[list[int], float]:
    """Per-item agreement (1 iff equal) and its average."""
    if len(preds) != len(truth):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truth)} truth bits")
    per_item = [1 if p == t else 0 for p, t in zip(preds.bits, truth.bits)]
    return per_item, sum(per_item) / len(per_item)


def aggregate_rounds(per_round: Sequence[float]) -> tuple[float, float | None]:
    """Arithmetic mean and sample standard deviation (denominator R-1)."""
    if not per_round:
        raise InsufficientRounds("no rounds to aggregate")
    mean = statistics.fmean(per_round)
    if len(per_round) < 2:
        return mean, None
    return mean, statistics.stdev(per_round)


_JUDGE_SCORE_RE = re.compile(r"^\s*(?:score\s*\W{0,4})?(-?\d+)\s*\.?\s*$", re.IGNORECASE)


def parse_judge_score(raw: str) -> int | None:
    """Accept a bare integer or 'Score: N'; None when unparseable."""
    m = _JUDGE_SCORE_RE.match(raw.strip())
    if not m:
        m = re.search(r"score\s*\W{0,4}(-?\d+)", raw, re.IGNORECASE)
        if not m:
            return None
    return int(m.group(1))


def judge_prompt(comment: str, reference: str, rubric: RubricSpec, dimension: str) -> list[ChatMessage]:
    focus = _DIMENSION_FOCUS[dimension]
    system = (
        "You are a strict scoring model for automatically generated grading"
        f" feedback. Rate one dimension, {dimension}: {focus}. Compare the"
        " candidate feedback with the expert reference. Respond with a single"
        " integer from 1 to 5, as 'Score: N', and nothing else."
    )
    user = (
        f"Rubric:\n{format_rubric(rubric)}\n\n"
        f"Expert reference feedback:\n{reference}\n\n"
        f"Candidate feedback to score:\n{comment}"
    )
    return [ChatMessage.text("system", system), ChatMessage.text("user", user)]


def judge_feedback(
    comment: str,
    reference: str,
    rubric: RubricSpec,
    dimension: str,
    backend,
    repeats: int = 20,
) -> tuple[float, list[int]]:
    """Average of ``repeats`` independent judge calls on a 1..5 scale.

    Out-of-range or unparseable responses are resampled once, then discarded;
    the mean covers retained scores only.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    messages = judge_prompt(comment, reference, rubric, dimension)
    scores: list[int] = []
    for _ in range(repeats):
        score = _one_judge_score(backend, messages)
        if score is None:
            score = _one_judge_score(backend, messages)  # one resample
        if score is not None:
            scores.append(score)
    if not scores:
        raise NoValidScores(f"all {repeats} judge repeats were discarded")
    return statistics.fmean(scores), scores


def _one_judge_score(backend, messages) -> int | None:
    score = parse_judge_score(backend.complete(messages).text)
    if score is None or not (1 <= score <= 5):
        return None
    return score


# --- dataset manifest -------------------------------------------------------

def load_manifest(path: str | Path) -> list[EvalSample]:
    """Manifest: JSON list of {sample_id, notebook, rubric, truth_bits, reference_feedback}."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"{path}: {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise MalformedDocument(f"{path}: expected a non-empty JSON list")
    base = path.parent
    samples = []
    for entry in entries:
        rubric = load_rubric((base / entry["rubric"]).read_bytes())
        samples.append(
            EvalSample(
                sample_id=entry["sample_id"],
                notebook_ref=str(base / entry["notebook"]),
                rubric_ref=str(base / entry["rubric"]),
                truth_bits=parse_score_string(entry["truth_bits"], rubric.k),
                reference_feedback=entry["reference_feedback"],
            )
        )
    return samples


@dataclass(frozen=True)
class _LoadedSample:
    sample: EvalSample
    notebook: Notebook
    rubric: RubricSpec


def _load_samples(samples: Sequence[EvalSample]) -> list[_LoadedSample]:
    loaded = []
    for s in samples:
        nb = parse_notebook(Path(s.notebook_ref).read_bytes(), source_id=s.notebook_ref)
        rubric = load_rubric(Path(s.rubric_ref).read_bytes())
        loaded.append(_LoadedSample(sample=s, notebook=nb, rubric=rubric))
    return loaded


def _grade_once(item: _LoadedSample, system: str, backend, opts: PipelineOptions, tag: str):
    """Returns (bits, feedback_comment) for one sample under one system."""
    if system == "agacci":
        result = run_pipeline(item.notebook, item.rubric, backend, opts, run_tag=tag)
        return result.final.bits, result.summary.comment
    verdict = sli_evaluate(item.rubric, extract_artifacts(item.notebook), backend)
    return verdict.bits, verdict.feedback


def run_experiment(
    samples: Sequence[EvalSample],
    backend,
    judge_backend,
    systems: Sequence[str] = SYSTEMS,
    rounds: int = 6,
    repeats: int = 20,
    opts: PipelineOptions | None = None,
) -> dict[str, MetricsReport]:
    """Grade every sample over R rounds per system, then score feedback quality.

    Failed runs exclude the sample from that round's denominators (flagged in
    the report) rather than counting as all-items-wrong.
    """
    if not samples:
        raise ValueError("dataset is empty")
    opts = opts or PipelineOptions()
    loaded = _load_samples(samples)
    reports = {}
    for system in systems:
        if system not in SYSTEMS:
            raise ValueError(f"unknown system {system!r}")
        reports[system] = _run_system(loaded, system, backend, judge_backend, rounds, repeats, opts)
    return reports


def _run_system(loaded, system, backend, judge_backend, rounds, repeats, opts) -> MetricsReport:
    # per (task, item index): list over rounds of across-sample accuracy
    item_rounds: dict[tuple[str, int], list[float]] = {}
    item_desc: dict[tuple[str, int], str] = {}
    overall_rounds: list[float] = []
    excluded: list[str] = []
    comments: dict[str, str] = {}

    for round_index in range(rounds):
        per_item_hits: dict[tuple[str, int], list[int]] = {}
        sample_means: list[float] = []
        for item in loaded:
            tag = f"{system}-r{round_index}-{item.sample.sample_id}"
            try:
                bits, comment = _grade_once(item, system, backend, opts, tag)
            except Exception as exc:  # noqa: BLE001 - isolate per sample
                excluded.append(f"{item.sample.sample_id} (round {round_index}): {exc}")
                continue
            if round_index == 0:
                comments[item.sample.sample_id] = comment
            per_item, mean = rubric_accuracy(bits, item.sample.truth_bits)
            sample_means.append(mean)
            for rubric_item, hit in zip(item.rubric.items, per_item):
                key = (item.rubric.task_id, rubric_item.index)
                item_desc[key] = rubric_item.description
                per_item_hits.setdefault(key, []).append(hit)
        for key, hits in per_item_hits.items():
            item_rounds.setdefault(key, []).append(sum(hits) / len(hits))
        if sample_means:
            overall_rounds.append(statistics.fmean(sample_means))

    items = []
    for key in sorted(item_rounds):
        mean, std = aggregate_rounds(item_rounds[key])
        items.append(
            ItemMetric(task=key[0], index=key[1], description=item_desc[key], mean=mean, std=std)
        )
    overall_mean, overall_std = aggregate_rounds(overall_rounds)

    qualitative: dict[str, tuple[float, float | None]] = {}
    for dimension in DIMENSIONS:
        per_sample_means = []
        for item in loaded:
            comment = comments.get(item.sample.sample_id)
            if comment is None:
                continue
            mean, _raw = judge_feedback(
                comment, item.sample.reference_feedback, item.rubric, dimension,
                judge_backend, repeats=repeats,
            )
            per_sample_means.append(mean)
        if per_sample_means:
            qualitative[dimension] = aggregate_rounds(per_sample_means)

    return MetricsReport(
        system=system,
        rounds=rounds,
        repeats=repeats,
        items=tuple(items),
        overall_mean=overall_mean,
        overall_std=overall_std,
        qualitative=qualitative,
        excluded=tuple(excluded),
    )


# --- report serialization & rendering ---------------------------------------

def format_mean_std(mean: float, std: float | None) -> str:
    """Fixed 4-decimal 'mean±std' cell; 'n/a' std below two rounds."""
    if std is None:
        return f"{mean:.4f}±n/a"
    return f"{mean:.4f}±{std:.4f}"


def report_to_dict(report: MetricsReport) -> dict:
    return {
        "system": report.system,
        "rounds": report.rounds,
        "repeats": report.repeats,
        "items": [
            {
                "task": it.task,
                "index": it.index,
                "description": it.description,
                "mean": it.mean,
                "std": it.std,
            }
            for it in report.items
        ],
        "overall": {"mean": report.overall_mean, "std": report.overall_std},
        "qualitative": {
            dim: {"mean": mean, "std": std} for dim, (mean, std) in report.qualitative.items()
        },
        "excluded": list(report.excluded),
        "aggregation_note": "dimension scores aggregate across samples by arithmetic mean",
    }


def report_from_dict(doc: dict) -> MetricsReport:
    return MetricsReport(
        system=doc["system"],
        rounds=doc["rounds"],
        repeats=doc["repeats"],
        items=tuple(
            ItemMetric(
                task=it["task"],
                index=it["index"],
                description=it["description"],
                mean=it["mean"],
                std=it["std"],
            )
            for it in doc["items"]
        ),
        overall_mean=doc["overall"]["mean"],
        overall_std=doc["overall"]["std"],
        qualitative={
            dim: (v["mean"], v["std"]) for dim, v in doc.get("qualitative", {}).items()
        },
        excluded=tuple(doc.get("excluded", [])),
    )


def render_comparison_table(reports: Sequence[MetricsReport]) -> str:
    """Rows 'task | rubric item | <one mean±std cell per system>'.

    Rows sort by (task, rubric index); systems by registry order.  Duplicate
    (task, item, system) keys are a caller error and raise ValueError.
    """
    systems = [s for s in SYSTEMS if any(r.system == s for r in reports)]
    cells: dict[tuple[str, int, str], str] = {}
    descriptions: dict[tuple[str, int], str] = {}
    for report in reports:
        for it in report.items:
            key = (it.task, it.index, report.system)
            if key in cells:
                raise ValueError(f"duplicate metrics for task={it.task} item={it.index} system={report.system}")
            cells[key] = format_mean_std(it.mean, it.std)
            descriptions[(it.task, it.index)] = it.description
    lines = ["Task | Rubric Item | " + " | ".join(s.upper() for s in systems)]
    for task, index in sorted(descriptions):
        row = [task, descriptions[(task, index)]]
        for system in systems:
            row.append(cells.get((task, index, system), "n/a"))
        lines.append(" | ".join(row))
    return "\n".join(lines) + "\n"
