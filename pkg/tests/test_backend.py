import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

import helpers
from agacci.backend import (
    BackendConfig,
    ChatMessage,
    FunctionBackend,
    LiveBackend,
    RecordingBackend,
    ReplayBackend,
    fingerprint,
    image_part,
    load_tape,
    save_tape,
    text_part,
)
from agacci.errors import AuthError, BadRequest, RateLimited, TapeMiss, TransportError


def _messages():
    return [
        ChatMessage.text("system", "You are terse."),
        ChatMessage(
            role="user",
            parts=(text_part("what is in this image?"), image_part("image/png", helpers.PNG_1X1)),
        ),
    ]


class TestFingerprint:
    def test_matches_independent_canonical_recomputation(self):
        # oracle: rebuild the canonical byte stream by hand from the documented
        # form (role, part kind, text or media-type:payload-digest, separators)
        messages = _messages()
        h = hashlib.sha256()
        for role, parts in [
            ("system", [("text", "You are terse.")]),
            (
                "user",
                [
                    ("text", "what is in this image?"),
                    (
                        "image",
                        "image/png:" + hashlib.sha256(helpers.PNG_1X1.encode()).hexdigest(),
                    ),
                ],
            ),
        ]:
            h.update(role.encode() + b"\x00")
            for kind, payload in parts:
                h.update(kind.encode() + b"\x01" + payload.encode() + b"\x02")
            h.update(b"\x03")
        assert fingerprint(messages) == h.hexdigest()

    def test_stable_across_reconstruction(self):
        assert fingerprint(_messages()) == fingerprint(_messages())

    def test_sensitive_to_text_and_image_changes(self):
        base = fingerprint(_messages())
        other = [ChatMessage.text("system", "You are terse."), ChatMessage.text("user", "hi")]
        assert fingerprint(other) != base


class TestReplay:
    def test_scripted_response(self):
        msgs = _messages()
        backend = ReplayBackend([(fingerprint(msgs), "Score: 111")])
        assert backend.complete(msgs).text == "Score: 111"

    def test_entry_consumed(self):
        msgs = _messages()
        backend = ReplayBackend([(fingerprint(msgs), "once")])
        backend.complete(msgs)
        with pytest.raises(TapeMiss):
            backend.complete(msgs)

    def test_duplicate_fingerprints_served_in_tape_order(self):
        msgs = _messages()
        fp = fingerprint(msgs)
        backend = ReplayBackend([(fp, "first"), (fp, "second")])
        assert backend.complete(msgs).text == "first"
        assert backend.complete(msgs).text == "second"

    def test_tape_file_round_trip(self, tmp_path):
        tape = [("abc", "hello"), ("def", "world")]
        path = tmp_path / "tape.json"
        save_tape(tape, path)
        assert load_tape(path) == tape

    def test_recording_backend_produces_replayable_tape(self):
        msgs = _messages()
        recorder = RecordingBackend(FunctionBackend(lambda m: "recorded"))
        recorder.complete(msgs)
        replay = ReplayBackend(recorder.tape)
        assert replay.complete(msgs).text == "recorded"


class _StubHandler(BaseHTTPRequestHandler):
    script = []  # list of (status, body dict) consumed per hit
    hits = 0
    bodies = []

    def do_POST(self):
        cls = type(self)
        length = int(self.headers["Content-Length"])
        cls.bodies.append(json.loads(self.rfile.read(length)))
        status, body = cls.script[min(cls.hits, len(cls.script) - 1)]
        cls.hits += 1
        payload = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    class Handler(_StubHandler):
        script = [(200, {"choices": [{"message": {"content": "ok"}}]})]
        hits = 0
        bodies = []

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield Handler, f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


def _cfg(url, **kwargs):
    defaults = dict(
        endpoint_url=url,
        model_name="test-model",
        max_retries=2,
        timeout=5.0,
        api_key_env="TEST_API_KEY",
        backoff_base=0.001,
    )
    defaults.update(kwargs)
    return BackendConfig(**defaults)


class TestLiveBackend:
    def test_unset_key_env_fails_before_any_network_call(self, stub_server, monkeypatch):
        handler, url = stub_server
        monkeypatch.delenv("TEST_API_KEY", raising=False)
        with pytest.raises(AuthError):
            LiveBackend(_cfg(url)).complete(_messages())
        assert handler.hits == 0

    def test_success_returns_first_choice(self, stub_server, monkeypatch):
        handler, url = stub_server
        monkeypatch.setenv("TEST_API_KEY", "sekrit")
        result = LiveBackend(_cfg(url)).complete([ChatMessage.text("user", "hi")])
        assert result.text == "ok"
        assert handler.hits == 1

    def test_wire_body_contains_text_and_image_data_url(self, stub_server, monkeypatch):
        handler, url = stub_server
        monkeypatch.setenv("TEST_API_KEY", "sekrit")
        LiveBackend(_cfg(url)).complete(_messages())
        body = handler.bodies[0]
        assert body["model"] == "test-model"
        content = body["messages"][1]["content"]
        kinds = [part["type"] for part in content]
        assert kinds == ["text", "image_url"]
        assert content[1]["image_url"]["url"] == f"data:image/png;base64,{helpers.PNG_1X1}"

    def test_retry_ceiling_on_500(self, stub_server, monkeypatch):
        handler, url = stub_server
        handler.script = [(500, {})]
        monkeypatch.setenv("TEST_API_KEY", "sekrit")
        with pytest.raises(TransportError):
            LiveBackend(_cfg(url, max_retries=2)).complete(_messages())
        assert handler.hits == 3  # 1 + max_retries

    def test_429_retries_then_rate_limited(self, stub_server, monkeypatch):
        handler, url = stub_server
        handler.script = [(429, {})]
        monkeypatch.setenv("TEST_API_KEY", "sekrit")
        with pytest.raises(RateLimited):
            LiveBackend(_cfg(url, max_retries=1)).complete(_messages())
        assert handler.hits == 2

    def test_400_never_retries(self, stub_server, monkeypatch):
        handler, url = stub_server
        handler.script = [(400, {"error": "bad"})]
        monkeypatch.setenv("TEST_API_KEY", "sekrit")
        with pytest.raises(BadRequest):
            LiveBackend(_cfg(url)).complete(_messages())
        assert handler.hits == 1

    def test_403_raises_auth_error_without_retry(self, stub_server, monkeypatch):
        handler, url = stub_server
        handler.script = [(403, {})]
        monkeypatch.setenv("TEST_API_KEY", "sekrit")
        with pytest.raises(AuthError):
            LiveBackend(_cfg(url)).complete(_messages())
        assert handler.hits == 1

    def test_429_then_success_recovers(self, stub_server, monkeypatch):
        handler, url = stub_server
        handler.script = [(429, {}), (200, {"choices": [{"message": {"content": "late"}}]})]
        monkeypatch.setenv("TEST_API_KEY", "sekrit")
        assert LiveBackend(_cfg(url)).complete(_messages()).text == "late"

    def test_api_key_never_leaks_into_errors(self, stub_server, monkeypatch):
        handler, url = stub_server
        handler.script = [(500, {})]
        monkeypatch.setenv("TEST_API_KEY", "super-secret-key-123")
        with pytest.raises(TransportError) as excinfo:
            LiveBackend(_cfg(url, max_retries=0)).complete(_messages())
        assert "super-secret-key-123" not in str(excinfo.value)
