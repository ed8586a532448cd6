"""Chat-completion backends.

One protocol (``complete(messages) -> CompletionResult``), three concrete
backends: a live OpenAI-compatible HTTP client, a deterministic replay
backend driven by a tape of (fingerprint, response) pairs, and a function
backend for scripting tests.  A recording wrapper captures any backend's
traffic into a tape.
"""
from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .errors import (
    AuthError,
    BadRequest,
    EmptyCompletion,
    RateLimited,
    TapeMiss,
    TransportError,
)


@dataclass(frozen=True)
class ContentPart:
    kind: str  # text | image
    text: str | None = None
    media_type: str | None = None
    base64_payload: str | None = None

    def __post_init__(self):
        if self.kind == "text" and (self.text is None or self.base64_payload is not None):
            raise ValueError("text part must carry text only")
        if self.kind == "image" and (self.base64_payload is None or self.text is not None):
            raise ValueError("image part must carry a payload only")


def text_part(text: str) -> ContentPart:
    return ContentPart(kind="text", text=text)


def image_part(media_type: str, base64_payload: str) -> ContentPart:
    return ContentPart(kind="image", media_type=media_type, base64_payload=base64_payload)


@dataclass(frozen=True)
class ChatMessage:
    role: str  # system | user | assistant
    parts: tuple[ContentPart, ...]

    def __post_init__(self):
        if not self.parts:
            raise ValueError("message must have at least one part")

    @classmethod
    def text(cls, role: str, content: str) -> "ChatMessage":
        return cls(role=role, parts=(text_part(content),))


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str
    model_name: str
    temperature: float = 0.2
    max_retries: int = 3
    timeout: float = 60.0
    api_key_env: str = "OPENAI_API_KEY"
    backoff_base: float = 1.0  # seconds; tests shrink this

    def __post_init__(self):
        if not (0 <= self.max_retries <= 5):
            raise ValueError("max_retries must be in 0..5")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    latency: float = 0.0


def fingerprint(messages: Sequence[ChatMessage]) -> str:
    """Stable digest of a message list; images hashed by payload digest."""
    h = hashlib.sha256()
    for msg in messages:
        h.update(msg.role.encode())
        h.update(b"\x00")
        for part in msg.parts:
            h.update(part.kind.encode())
            h.update(b"\x01")
            if part.kind == "text":
                h.update(part.text.encode())
            else:
                payload_digest = hashlib.sha256(part.base64_payload.encode()).hexdigest()
                h.update(f"{part.media_type}:{payload_digest}".encode())
            h.update(b"\x02")
        h.update(b"\x03")
    return h.hexdigest()


def _wire_content(parts: Sequence[ContentPart]):
    if len(parts) == 1 and parts[0].kind == "text":
        return parts[0].text
    content = []
    for part in parts:
        if part.kind == "text":
            content.append({"type": "text", "text": part.text})
        else:
            url = f"data:{part.media_type};base64,{part.base64_payload}"
            content.append({"type": "image_url", "image_url": {"url": url}})
    return content


class LiveBackend:
    """OpenAI-compatible chat completions over HTTP with retry + backoff.

    Retries transport errors and 429/5xx with exponential backoff (base
    ``backoff_base``, factor 2, full jitter); other 4xx never retry.  The
    API key is read from the environment at call time and never stored.
    """

    def __init__(self, cfg: BackendConfig, sleep: Callable[[float], None] = time.sleep):
        self.cfg = cfg
        self._sleep = sleep

    def complete(self, messages: Sequence[ChatMessage]) -> CompletionResult:
        key = os.environ.get(self.cfg.api_key_env)
        if not key:
            raise AuthError(f"environment variable {self.cfg.api_key_env} is not set")
        body = {
            "model": self.cfg.model_name,
            "temperature": self.cfg.temperature,
            "messages": [
                {"role": m.role, "content": _wire_content(m.parts)} for m in messages
            ],
        }
        url = self.cfg.endpoint_url.rstrip("/") + "/chat/completions"
        started = time.monotonic()
        attempts = 1 + self.cfg.max_retries
        last_failure = "no attempt made"
        for attempt in range(attempts):
            if attempt:
                delay = random.uniform(0, self.cfg.backoff_base * (2 ** (attempt - 1)))
                self._sleep(delay)
            try:
                resp = httpx.post(
                    url,
                    json=body,
                    headers={"Authorization": f"Bearer {key}"},
                    timeout=self.cfg.timeout,
                )
            except httpx.HTTPError as exc:
                last_failure = f"transport failure: {type(exc).__name__}"
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"backend rejected credentials (HTTP {resp.status_code})")
            if resp.status_code == 400:
                raise BadRequest(f"backend rejected request: {resp.text[:500]}")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_failure = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise TransportError(f"unexpected HTTP {resp.status_code}")
            return self._extract(resp, time.monotonic() - started)
        if last_failure.startswith("HTTP 429"):
            raise RateLimited(f"still rate limited after {attempts} attempts")
        raise TransportError(f"gave up after {attempts} attempts: {last_failure}")

    @staticmethod
    def _extract(resp: httpx.Response, latency: float) -> CompletionResult:
        try:
            doc = resp.json()
            choice = doc["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, LookupError, TypeError) as exc:
            raise TransportError(f"malformed completion response: {exc}") from exc
        if not text:
            raise EmptyCompletion("backend returned an empty choice")
        usage = doc.get("usage") or {}
        return CompletionResult(
            text=text,
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
            latency=latency,
        )


class ReplayBackend:
    """Deterministic backend fed by a tape of (fingerprint, response) pairs.

    Matching consumes entries; entries sharing a fingerprint are served in
    tape order.  Unmatched calls raise TapeMiss rather than inventing text.
    """

    def __init__(self, tape: Sequence[tuple[str, str]]):
        self._queues: dict[str, deque[str]] = {}
        for fp, response in tape:
            self._queues.setdefault(fp, deque()).append(response)
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage]) -> CompletionResult:
        fp = fingerprint(messages)
        with self._lock:
            queue = self._queues.get(fp)
            if not queue:
                raise TapeMiss(f"no tape entry for fingerprint {fp[:16]}...")
            return CompletionResult(text=queue.popleft())


class FunctionBackend:
    """Backend driven by a callable; used for scripting pipelines in tests."""

    def __init__(self, fn: Callable[[Sequence[ChatMessage]], str]):
        self._fn = fn
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage]) -> CompletionResult:
        with self._lock:
            return CompletionResult(text=self._fn(messages))


class RecordingBackend:
    """Wraps another backend, capturing (fingerprint, response) pairs."""

    def __init__(self, inner):
        self._inner = inner
        self._lock = threading.Lock()
        self.tape: list[tuple[str, str]] = []

    def complete(self, messages: Sequence[ChatMessage]) -> CompletionResult:
        result = self._inner.complete(messages)
        with self._lock:
            self.tape.append((fingerprint(messages), result.text))
        return result


def save_tape(tape: Sequence[tuple[str, str]], path: str | Path) -> None:
    entries = [{"fingerprint": fp, "response_text": text} for fp, text in tape]
    Path(path).write_text(json.dumps(entries, indent=2), encoding="utf-8")


def load_tape(path: str | Path) -> list[tuple[str, str]]:
    entries = json.loads(Path(path).read_text(encoding="utf-8"))
    return [(e["fingerprint"], e["response_text"]) for e in entries]
