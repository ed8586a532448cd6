"""Rubric model: instructor criteria, interpreted form, and verdict bits.

Rubric files are JSON: top-level ``task_id``, ``title``, ``items`` (list of
``{index, description, evidence_hint?}``).  Interpreted-rubric payloads are a
``rubrics`` list of objects with ``final_objective``, ``prerequisite_items``,
``subgoals`` and ``evidence_types``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import MalformedDocument, MalformedScore, SchemaViolation


@dataclass(frozen=True)
class RubricItem:
    index: int  # 1-based
    description: str
    evidence_hint: str | None = None

    def __post_init__(self):
        if not self.description:
            raise SchemaViolation(f"rubric item {self.index}: empty description")


@dataclass(frozen=True)
class RubricSpec:
    task_id: str
    title: str
    items: tuple[RubricItem, ...]

    def __post_init__(self):
        if not self.items:
            raise SchemaViolation(f"rubric {self.task_id!r}: no items")
        indices = [it.index for it in self.items]
        if indices != list(range(1, len(self.items) + 1)):
            raise SchemaViolation(
                f"rubric {self.task_id!r}: item indices {indices} are not 1..{len(self.items)}"
            )

    @property
    def k(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class InterpretedItem:
    final_objective: str
    prerequisite_items: tuple[str, ...] = ()
    subgoals: tuple[str, ...] = ()
    evidence_types: tuple[str, ...] = ()


@dataclass(frozen=True)
class InterpretedRubric:
    entries: tuple[InterpretedItem, ...]


@dataclass(frozen=True)
class VerdictBits:
    """Per-item pass/fail; True means pass."""

    bits: tuple[bool, ...]

    def __post_init__(self):
        if not self.bits:
            raise SchemaViolation("verdict must cover at least one rubric item")

    def __len__(self) -> int:
        return len(self.bits)


def load_rubric(raw: bytes) -> RubricSpec:
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedDocument(f"rubric file: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("items"), list):
        raise MalformedDocument("rubric file: expected an object with an 'items' list")
    items = []
    seen = set()
    for raw_item in doc["items"]:
        idx = raw_item.get("index")
        if idx in seen:
            raise SchemaViolation(f"rubric file: duplicate item index {idx}")
        seen.add(idx)
        items.append(
            RubricItem(
                index=idx,
                description=raw_item.get("description", ""),
                evidence_hint=raw_item.get("evidence_hint"),
            )
        )
    items.sort(key=lambda it: it.index)
    return RubricSpec(
        task_id=doc.get("task_id", ""),
        title=doc.get("title", ""),
        items=tuple(items),
    )


_REQUIRED_ENTRY_FIELDS = ("final_objective", "prerequisite_items", "subgoals", "evidence_types")


def validate_interpretation(spec: RubricSpec, candidate: str | dict) -> InterpretedRubric:
    """Check an interpreter payload against the rubric it operationalizes.

    ``candidate`` may be raw JSON text or an already-decoded object.  Unknown
    fields are ignored; missing required structure raises SchemaViolation so
    the orchestrator can issue a repair retry.
    """
    if isinstance(candidate, (str, bytes)):
        try:
            doc = json.loads(candidate)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"interpretation is not valid JSON: {exc}") from exc
    else:
        doc = candidate
    if not isinstance(doc, dict) or not isinstance(doc.get("rubrics"), list):
        raise SchemaViolation("interpretation: expected an object with a 'rubrics' list")
    raw_entries = doc["rubrics"]
    if len(raw_entries) != spec.k:
        raise SchemaViolation(
            f"interpretation has {len(raw_entries)} entries, rubric has {spec.k}"
        )
    entries = []
    for i, raw in enumerate(raw_entries, start=1):
        if not isinstance(raw, dict):
            raise SchemaViolation(f"interpretation entry {i} is not an object")
        objective = raw.get("final_objective")
        if not objective or not isinstance(objective, str):
            raise SchemaViolation(f"interpretation entry {i}: missing final_objective")
        evidence = raw.get("evidence_types") or []
        if not evidence:
            raise SchemaViolation(f"interpretation entry {i}: empty evidence_types")
        entries.append(
            InterpretedItem(
                final_objective=objective,
                prerequisite_items=tuple(str(x) for x in raw.get("prerequisite_items") or []),
                subgoals=tuple(str(x) for x in raw.get("subgoals") or []),
                evidence_types=tuple(str(x) for x in evidence),
            )
        )
    return InterpretedRubric(entries=tuple(entries))


_SCORE_RE = re.compile(r"^\s*(?:score\s*:\s*)?([01]+)\s*$", re.IGNORECASE)


def parse_score_string(s: str, k: int) -> VerdictBits:
    """Decode a length-k bit string; '1' is pass.  Tolerates a 'Score:' prefix."""
    m = _SCORE_RE.match(s)
    if not m:
        raise MalformedScore(f"not a bit string: {s!r}")
    digits = m.group(1)
    if len(digits) != k:
        raise MalformedScore(f"expected {k} bits, got {len(digits)}: {s!r}")
    return VerdictBits(bits=tuple(c == "1" for c in digits))


def render_score_string(v: VerdictBits) -> str:
    return "".join("1" if b else "0" for b in v.bits)
