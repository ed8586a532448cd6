"""Agent role registry, prompt rendering, and response parsers.

Each role is a (prompt template, input contract, output contract) triple.
Templates live in text files with ``[system]`` / ``[user]`` sections and
named placeholders, overridable via a prompt directory so wording can be
tuned without touching code.

Parsers are lenient to surrounding prose (models decorate their output) but
bounded: they either succeed or raise UnparseableVerdict, never silently
default a status.
"""
from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .backend import ChatMessage, ContentPart, image_part, text_part
from .errors import MissingPlaceholder, SchemaViolation, UnparseableVerdict
from .rubric import (
    RubricSpec,
    VerdictBits,
    parse_score_string,
    render_score_string,
)

ALLOWED_PLACEHOLDERS = frozenset(
    {
        "rubric",
        "interpreted_rubric",
        "digest_code",
        "digest_markdown",
        "digest_outputs",
        "upstream_findings",
        "k",
    }
)

ROLE_IDS = (
    "rubric_interpreter",
    "submission_analyzer",
    "execution_evaluator",
    "result_evaluator",
    "visualization_evaluator",
    "interpretation_evaluator",
    "meta_evaluator",
    "final_judge",
    "summarizer",
    "sli_baseline",
)

STREAMS = ("execution", "result", "visualization", "interpretation")

_DEFAULT_PROMPT_DIR = Path(__file__).parent / "prompts"
_FORMATTER = string.Formatter()


@dataclass(frozen=True)
class AgentRole:
    id: str
    system_template: str
    user_template: str
    output_contract: str  # structured_payload | free_text | score_and_comment

    @property
    def placeholders(self) -> frozenset[str]:
        names = set()
        for template in (self.system_template, self.user_template):
            for _, name, _, _ in _FORMATTER.parse(template):
                if name:
                    names.add(name)
        return frozenset(names)


_OUTPUT_CONTRACTS = {
    "rubric_interpreter": "structured_payload",
    "submission_analyzer": "free_text",
    "execution_evaluator": "structured_payload",
    "result_evaluator": "structured_payload",
    "visualization_evaluator": "structured_payload",
    "interpretation_evaluator": "structured_payload",
    "meta_evaluator": "structured_payload",
    "final_judge": "score_and_comment",
    "summarizer": "score_and_comment",
    "sli_baseline": "score_and_comment",
}


def _split_template(text: str, path: Path) -> tuple[str, str]:
    if "[system]" not in text or "[user]" not in text:
        raise SchemaViolation(f"{path}: template needs [system] and [user] sections")
    _, rest = text.split("[system]", 1)
    system, user = rest.split("[user]", 1)
    return system.strip(), user.strip()


def load_roles(prompt_dir: str | Path | None = None) -> dict[str, AgentRole]:
    """Load all ten roles; files in ``prompt_dir`` override the shipped ones."""
    roles = {}
    override = Path(prompt_dir) if prompt_dir else None
    for role_id in ROLE_IDS:
        path = _DEFAULT_PROMPT_DIR / f"{role_id}.txt"
        if override and (override / f"{role_id}.txt").exists():
            path = override / f"{role_id}.txt"
        system, user = _split_template(path.read_text(encoding="utf-8"), path)
        role = AgentRole(
            id=role_id,
            system_template=system,
            user_template=user,
            output_contract=_OUTPUT_CONTRACTS[role_id],
        )
        unknown = role.placeholders - ALLOWED_PLACEHOLDERS
        if unknown:
            raise SchemaViolation(f"{path}: unknown placeholders {sorted(unknown)}")
        roles[role_id] = role
    return roles


def render_prompt(
    role: AgentRole,
    context: Mapping[str, str],
    images: Sequence[tuple[str, str]] = (),
) -> list[ChatMessage]:
    """Fill a role's templates into one system + one user message.

    ``images`` is a list of (media_type, base64) pairs appended to the user
    message; the caller decides when image handling is multimodal.
    """
    for name in role.placeholders:
        if name not in context:
            raise MissingPlaceholder(name)
    system_text = role.system_template.format_map(dict(context))
    user_text = role.user_template.format_map(dict(context))
    parts: list[ContentPart] = [text_part(user_text)]
    parts.extend(image_part(media_type, payload) for media_type, payload in images)
    return [
        ChatMessage.text("system", system_text),
        ChatMessage(role="user", parts=tuple(parts)),
    ]


# --- verdict / report types ------------------------------------------------

@dataclass(frozen=True)
class StreamVerdict:
    stream: str
    status: str  # pass | fail | abstain
    justification: str
    evidence_cells: tuple[int, ...] = ()

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise SchemaViolation(f"unknown stream {self.stream!r}")
        if self.status == "abstain" and self.stream != "result":
            raise SchemaViolation("only the result stream may abstain")
        if self.status != "abstain" and not self.justification:
            raise SchemaViolation("non-abstain verdict needs a justification")


@dataclass(frozen=True)
class MetaFlag:
    kind: str  # contradiction | unsupported | misalignment
    streams: tuple[str, ...]
    note: str

    def __post_init__(self):
        if not self.streams:
            raise SchemaViolation("meta flag must reference at least one stream")


@dataclass(frozen=True)
class MetaReport:
    flags: tuple[MetaFlag, ...] = ()
    suggested_overrides: tuple[tuple[str, str, str], ...] = ()  # (stream, new_status, reason)


@dataclass(frozen=True)
class FinalVerdict:
    bits: VerdictBits
    feedback: str
    strengths: tuple[str, ...] = ()
    weaknesses: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.feedback:
            raise SchemaViolation("final verdict needs non-empty feedback")


@dataclass(frozen=True)
class SummaryRecord:
    score_string: str
    comment: str
    strengths: tuple[str, ...] = ()
    improvements: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.comment:
            raise SchemaViolation("summary needs a non-empty comment")


# --- lenient extraction helpers -------------------------------------------

_FENCE_RE = re.compile(r"```(?:json)?\s*(\{.*?\})\s*```", re.DOTALL)


def _extract_json_block(raw: str) -> dict | None:
    """Pull the last parseable JSON object out of prose, fenced or bare."""
    candidates = [m.group(1) for m in _FENCE_RE.finditer(raw)]
    if not candidates:
        start = raw.find("{")
        end = raw.rfind("}")
        if start != -1 and end > start:
            candidates = [raw[start : end + 1]]
    for candidate in reversed(candidates):
        try:
            doc = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict):
            return doc
    return None


_STATUS_CANON = {
    "pass": "pass",
    "passed": "pass",
    "fail": "fail",
    "failed": "fail",
    "abstain": "abstain",
    "abstains": "abstain",
    "abstained": "abstain",
}
_STATUS_TOKEN_RE = re.compile(
    r"\b(pass(?:ed)?|fail(?:ed)?|abstain(?:s|ed)?)\b", re.IGNORECASE
)


def _cells(value) -> tuple[int, ...]:
    if not isinstance(value, list):
        return ()
    out = []
    for v in value:
        try:
            out.append(int(v))
        except (TypeError, ValueError):
            continue
    return tuple(out)


def parse_stream_verdict(raw: str, stream: str) -> StreamVerdict:
    doc = _extract_json_block(raw)
    status = None
    justification = ""
    cells: tuple[int, ...] = ()
    if doc is not None and isinstance(doc.get("status"), str):
        status = _STATUS_CANON.get(doc["status"].strip().lower())
        justification = (doc.get("justification") or "").strip()
        cells = _cells(doc.get("evidence_cells"))
    if status is None:
        m = _STATUS_TOKEN_RE.search(raw)
        if m:
            status = _STATUS_CANON[m.group(1).lower()]
            justification = raw.strip()
    if status is None:
        raise UnparseableVerdict(f"{stream}: no recognizable status in response")
    if status == "abstain" and stream != "result":
        raise UnparseableVerdict(f"{stream}: abstention is reserved to the result stream")
    if not justification and status != "abstain":
        justification = raw.strip()
        if not justification:
            raise UnparseableVerdict(f"{stream}: empty justification")
    return StreamVerdict(stream=stream, status=status, justification=justification, evidence_cells=cells)


_FLAG_KINDS = ("contradiction", "unsupported", "misalignment")


def parse_meta_report(raw: str) -> MetaReport:
    doc = _extract_json_block(raw)
    if doc is None:
        # prose without a structured block means nothing was flagged
        return MetaReport()
    flags = []
    for raw_flag in doc.get("flags") or []:
        if not isinstance(raw_flag, dict):
            raise UnparseableVerdict("meta flag is not an object")
        kind = raw_flag.get("kind")
        if kind not in _FLAG_KINDS:
            raise UnparseableVerdict(f"meta flag has unknown kind {kind!r}")
        streams = tuple(s for s in raw_flag.get("streams") or [] if s in STREAMS)
        if not streams:
            raise UnparseableVerdict("meta flag references no known stream")
        flags.append(MetaFlag(kind=kind, streams=streams, note=str(raw_flag.get("note", ""))))
    overrides = []
    for raw_ovr in doc.get("suggested_overrides") or []:
        if isinstance(raw_ovr, dict):
            overrides.append(
                (
                    str(raw_ovr.get("stream", "")),
                    str(raw_ovr.get("new_status", "")),
                    str(raw_ovr.get("reason", "")),
                )
            )
        elif isinstance(raw_ovr, (list, tuple)) and len(raw_ovr) == 3:
            overrides.append(tuple(str(x) for x in raw_ovr))
    return MetaReport(flags=tuple(flags), suggested_overrides=tuple(overrides))


_PASSFAIL_STATUS_RE = re.compile(
    r"(?:pass/fail\s+)?status\s*\W{0,4}\s*(passed|failed)\b", re.IGNORECASE
)
_SCORE_LINE_RE = re.compile(r"score\b\W{0,6}([01]+)", re.IGNORECASE)


def _score_from_prose(raw: str, k: int) -> VerdictBits | None:
    for m in _SCORE_LINE_RE.finditer(raw):
        if len(m.group(1)) == k:
            return parse_score_string(m.group(1), k)
    statuses = [_STATUS_CANON[m.group(1).lower()] for m in _PASSFAIL_STATUS_RE.finditer(raw)]
    if len(statuses) == k:
        return VerdictBits(bits=tuple(s == "pass" for s in statuses))
    return None


def _str_list(value) -> tuple[str, ...]:
    if not isinstance(value, list):
        return ()
    return tuple(str(v).strip() for v in value if str(v).strip())


def parse_final_verdict(raw: str, k: int) -> FinalVerdict:
    doc = _extract_json_block(raw)
    bits = None
    feedback = ""
    strengths: tuple[str, ...] = ()
    weaknesses: tuple[str, ...] = ()
    if doc is not None:
        score = doc.get("score")
        if isinstance(score, str):
            try:
                bits = parse_score_string(score, k)
            except Exception:
                bits = None
        feedback = (doc.get("feedback") or "").strip()
        strengths = _str_list(doc.get("strengths"))
        weaknesses = _str_list(doc.get("weaknesses"))
    if bits is None:
        bits = _score_from_prose(raw, k)
    if bits is None:
        raise UnparseableVerdict(f"final judge: no {k}-bit verdict found in response")
    if not feedback:
        feedback = raw.strip()
        if not feedback:
            raise UnparseableVerdict("final judge: empty feedback")
    return FinalVerdict(bits=bits, feedback=feedback, strengths=strengths, weaknesses=weaknesses)


_HEADING_BULLETS_RE = {
    "strengths": re.compile(r"^\W*strengths\b", re.IGNORECASE),
    "improvements": re.compile(r"^\W*(?:areas\s+for\s+)?improvements?\b", re.IGNORECASE),
    "comment": re.compile(r"^\W*comment\b", re.IGNORECASE),
}
_BULLET_RE = re.compile(r"^\s*[-*•]\s+(.*\S)\s*$")


def _prose_sections(raw: str) -> dict[str, object]:
    """Pull Comment prose and Strengths / Improvements bullets out of text."""
    lines = raw.splitlines()
    sections: dict[str, object] = {"strengths": [], "improvements": [], "comment": ""}
    current = None
    comment_lines: list[str] = []
    for line in lines:
        matched = None
        for name, pattern in _HEADING_BULLETS_RE.items():
            if pattern.match(line):
                matched = name
                break
        if matched:
            current = matched
            remainder = line.split(":", 1)[1].strip() if ":" in line else ""
            if current == "comment" and remainder:
                comment_lines.append(remainder)
            continue
        if current in ("strengths", "improvements"):
            m = _BULLET_RE.match(line)
            if m:
                sections[current].append(m.group(1))
            elif line.strip():
                current = None
        elif current == "comment":
            if line.strip():
                comment_lines.append(line.strip())
            elif comment_lines:
                current = None
    sections["comment"] = " ".join(comment_lines)
    return sections


def parse_summary(raw: str, k: int) -> SummaryRecord:
    doc = _extract_json_block(raw)
    if doc is not None and isinstance(doc.get("score"), str):
        try:
            bits = parse_score_string(doc["score"], k)
        except Exception as exc:
            raise UnparseableVerdict(f"summarizer: bad score string: {exc}") from exc
        comment = (doc.get("comment") or "").strip() or raw.strip()
        return SummaryRecord(
            score_string=render_score_string(bits),
            comment=comment,
            strengths=_str_list(doc.get("strengths")),
            improvements=_str_list(doc.get("improvements")),
        )
    bits = _score_from_prose(raw, k)
    if bits is None:
        raise UnparseableVerdict(f"summarizer: no {k}-bit score found in response")
    sections = _prose_sections(raw)
    comment = sections["comment"] or raw.strip()
    return SummaryRecord(
        score_string=render_score_string(bits),
        comment=comment,
        strengths=tuple(sections["strengths"]),
        improvements=tuple(sections["improvements"]),
    )


def render_summary(record: SummaryRecord) -> str:
    """Canonical rendering; parse_summary inverts it."""
    return "```json\n" + json.dumps(
        {
            "score": record.score_string,
            "comment": record.comment,
            "strengths": list(record.strengths),
            "improvements": list(record.improvements),
        },
        indent=2,
    ) + "\n```"


REPAIR_INSTRUCTION = (
    "Your previous response could not be parsed. "
    "Emit only the required structured block, with the exact field names, and nothing else."
)


def repair_messages(messages: Sequence[ChatMessage], previous_response: str) -> list[ChatMessage]:
    """Build the one-shot repair prompt: original exchange + terse instruction."""
    return [
        *messages,
        ChatMessage.text("assistant", previous_response),
        ChatMessage.text("user", REPAIR_INSTRUCTION),
    ]


def format_rubric(spec: RubricSpec) -> str:
    lines = [f"Task: {spec.title or spec.task_id}"]
    for item in spec.items:
        hint = f" (evidence: {item.evidence_hint})" if item.evidence_hint else ""
        lines.append(f"{item.index}. {item.description}{hint}")
    return "\n".join(lines)


def sli_evaluate(rubric: RubricSpec, digest, backend, roles=None) -> FinalVerdict:
    """Single-prompt baseline: one call with code + rubric, parsed leniently.

    One repair retry on parse failure, then the failure is raised.
    """
    roles = roles or load_roles()
    role = roles["sli_baseline"]
    context = {
        "rubric": format_rubric(rubric),
        "digest_code": digest.code_text,
        "digest_markdown": digest.markdown_text,
        "digest_outputs": format_outputs(digest),
        "k": str(rubric.k),
    }
    messages = render_prompt(role, context)
    response = backend.complete(messages).text
    try:
        return parse_final_verdict(response, rubric.k)
    except UnparseableVerdict:
        retry_response = backend.complete(repair_messages(messages, response)).text
        return parse_final_verdict(retry_response, rubric.k)


def format_outputs(digest, image_mode: str = "text") -> str:
    """Render recorded outputs for prompts; images become placeholders."""
    lines = []
    for cell_index, text in digest.printed_outputs:
        lines.append(f"[cell {cell_index}] {text.rstrip()}")
    for cell_index, media_type, _payload in digest.images:
        lines.append(f"[image output in cell {cell_index}] ({media_type})")
    if digest.any_error:
        lines.append("[at least one cell raised an error during execution]")
    return "\n".join(lines) if lines else "(no recorded outputs)"
