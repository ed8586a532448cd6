"""Parse nbformat-4 notebooks into a typed, ordered cell model.

Only nbformat major version 4 is accepted.  Image payloads stay base64
encoded; nothing here decodes them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import EmptyNotebook, MalformedDocument, UnsupportedFormat

MAX_DOCUMENT_BYTES = 16 * 1024 * 1024

_IMAGE_PREFIX = "image/"
_KNOWN_OUTPUT_KINDS = ("stream", "execute_result", "display_data", "error")


@dataclass(frozen=True)
class CellOutput:
    kind: str
    text: str | None = None
    image_media_type: str | None = None
    image_base64: str | None = None
    error_name: str | None = None
    traceback: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind == "error" and not self.error_name:
            raise MalformedDocument("error output without an error name")
        if (self.image_base64 is None) != (self.image_media_type is None):
            raise MalformedDocument("image payload and media type must appear together")
        if self.image_media_type is not None and not self.image_media_type.startswith(_IMAGE_PREFIX):
            raise MalformedDocument(f"not an image media type: {self.image_media_type}")
        if self.text is None and self.image_base64 is None and self.error_name is None:
            raise MalformedDocument("output carries no text, image, or error")


@dataclass(frozen=True)
class Cell:
    kind: str  # code | markdown | raw
    source: str
    outputs: tuple[CellOutput, ...] = ()
    execution_count: int | None = None
    index: int = 0

    def __post_init__(self):
        if self.outputs and self.kind != "code":
            raise MalformedDocument(f"non-code cell {self.index} has outputs")


@dataclass(frozen=True)
class Notebook:
    cells: tuple[Cell, ...]
    format_major: int
    format_minor: int
    metadata: dict[str, str]
    source_id: str


@dataclass(frozen=True)
class SubmissionDigest:
    """Flattened view of a notebook for prompt construction."""

    code_text: str
    markdown_text: str
    printed_outputs: tuple[tuple[int, str], ...]
    images: tuple[tuple[int, str, str], ...]  # (cell index, media type, base64)
    any_error: bool


def _join_source(source) -> str:
    if isinstance(source, list):
        return "".join(source)
    return source or ""


def _parse_output(raw: dict, warnings: list[str], cell_index: int) -> CellOutput:
    kind = raw.get("output_type", "")
    if kind == "stream":
        return CellOutput(kind="stream", text=_join_source(raw.get("text", "")))
    if kind == "error":
        return CellOutput(
            kind="error",
            error_name=raw.get("ename") or "UnknownError",
            text=raw.get("evalue"),
            traceback=tuple(raw.get("traceback", [])),
        )
    if kind in ("execute_result", "display_data"):
        data = raw.get("data", {})
        text = None
        media_type = None
        payload = None
        for mime, value in data.items():
            if mime.startswith(_IMAGE_PREFIX) and payload is None:
                media_type = mime
                payload = _join_source(value).strip()
            elif mime == "text/plain":
                text = _join_source(value)
        if text is None and payload is None:
            # unrecognized mime bundle: keep a readable trace of it
            text = json.dumps(data, sort_keys=True)
        return CellOutput(kind=kind, text=text, image_media_type=media_type, image_base64=payload)
    # unknown output kind: preserve as text and flag it
    warnings.append(f"cell {cell_index}: unknown output kind {kind!r}")
    return CellOutput(kind="stream", text=json.dumps(raw, sort_keys=True))


def parse_notebook(raw_bytes: bytes, source_id: str = "<memory>") -> Notebook:
    """Parse an nbformat-4 document into a Notebook.

    Raises MalformedDocument, UnsupportedFormat, or EmptyNotebook; each
    message names the offending location.
    """
    if len(raw_bytes) > MAX_DOCUMENT_BYTES:
        raise MalformedDocument(
            f"{source_id}: document is {len(raw_bytes)} bytes, over the {MAX_DOCUMENT_BYTES} byte limit"
        )
    try:
        doc = json.loads(raw_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedDocument(f"{source_id}: {exc}") from exc
    if not isinstance(doc, dict) or "cells" not in doc:
        raise MalformedDocument(f"{source_id}: missing top-level 'cells'")

    major = doc.get("nbformat")
    if major != 4:
        raise UnsupportedFormat(f"{source_id}: nbformat {major!r}, only 4 is supported")

    raw_cells = doc["cells"]
    if not raw_cells:
        raise EmptyNotebook(f"{source_id}: notebook has zero cells")

    warnings: list[str] = []
    cells = []
    for i, raw_cell in enumerate(raw_cells):
        kind = raw_cell.get("cell_type", "")
        if kind not in ("code", "markdown", "raw"):
            raise MalformedDocument(f"{source_id}: cell {i} has unknown cell_type {kind!r}")
        outputs = ()
        execution_count = None
        if kind == "code":
            outputs = tuple(
                _parse_output(o, warnings, i) for o in raw_cell.get("outputs", [])
            )
            execution_count = raw_cell.get("execution_count")
        if kind == "markdown" and raw_cell.get("attachments"):
            warnings.append(f"cell {i}: markdown attachments ignored")
        cells.append(
            Cell(
                kind=kind,
                source=_join_source(raw_cell.get("source", "")),
                outputs=outputs,
                execution_count=execution_count,
                index=i,
            )
        )

    metadata = {k: str(v) for k, v in doc.get("metadata", {}).items()}
    if warnings:
        metadata["ingest_warnings"] = "; ".join(warnings)
    return Notebook(
        cells=tuple(cells),
        format_major=major,
        format_minor=doc.get("nbformat_minor", 0),
        metadata=metadata,
        source_id=source_id or "<memory>",
    )


def extract_artifacts(nb: Notebook) -> SubmissionDigest:
    """Flatten a notebook into the digest every downstream agent consumes."""
    code_parts = []
    md_parts = []
    printed: list[tuple[int, str]] = []
    images: list[tuple[int, str, str]] = []
    any_error = False
    for cell in nb.cells:
        if cell.kind == "code":
            code_parts.append(f"# --- cell {cell.index} ---\n{cell.source}")
            for out in cell.outputs:
                if out.kind == "error":
                    any_error = True
                if out.image_base64 is not None:
                    images.append((cell.index, out.image_media_type, out.image_base64))
                if out.text:
                    printed.append((cell.index, out.text))
        elif cell.kind == "markdown":
            md_parts.append(cell.source)
    return SubmissionDigest(
        code_text="\n\n".join(code_parts),
        markdown_text="\n\n".join(md_parts),
        printed_outputs=tuple(printed),
        images=tuple(images),
        any_error=any_error,
    )
