import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

import helpers
from agacci.backend import FunctionBackend, RecordingBackend, save_tape
from agacci.cli import main
from agacci.harness import run_experiment, load_manifest
from agacci.notebook import parse_notebook
from agacci.orchestrator import PipelineOptions, run_pipeline
from agacci.rubric import load_rubric

from test_harness import dual_system_responder, table4_fixture_reports
from agacci.harness import report_to_dict


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "sub.ipynb").write_bytes(helpers.fixture_notebook_bytes())
    (tmp_path / "ml.rubric.json").write_bytes(helpers.rubric_bytes())
    manifest = [
        {
            "sample_id": "s1",
            "notebook": "sub.ipynb",
            "rubric": "ml.rubric.json",
            "truth_bits": "111",
            "reference_feedback": "Meets all rubric requirements.",
        }
    ]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    return tmp_path


def record_grade_tape(workspace, responder=None):
    nb = parse_notebook((workspace / "sub.ipynb").read_bytes(), source_id=str(workspace / "sub.ipynb"))
    rubric = load_rubric((workspace / "ml.rubric.json").read_bytes())
    recorder = RecordingBackend(FunctionBackend(responder or helpers.happy_responder()))
    run_pipeline(nb, rubric, recorder, PipelineOptions(deterministic=True))
    (workspace / "tapes").mkdir(exist_ok=True)
    save_tape(recorder.tape, workspace / "tapes" / "grade.json")
    return recorder.tape


def record_eval_tape(workspace, rounds=2, repeats=2):
    samples = load_manifest(workspace / "manifest.json")
    recorder = RecordingBackend(FunctionBackend(dual_system_responder()))
    run_experiment(
        samples,
        recorder,
        recorder,
        rounds=rounds,
        repeats=repeats,
        opts=PipelineOptions(deterministic=True),
    )
    (workspace / "tapes").mkdir(exist_ok=True)
    save_tape(recorder.tape, workspace / "tapes" / "eval.json")


class TestGrade:
    def test_prints_score_line_and_writes_result(self, workspace, capsys):
        record_grade_tape(workspace)
        code = main(
            ["--backend", "replay", "--tape-dir", "tapes",
             "grade", "sub.ipynb", "ml.rubric.json", "--out", "result.json"]
        )
        out = capsys.readouterr().out
        assert code == 0
        assert "Score: 111" in out
        doc = json.loads((workspace / "result.json").read_text())
        assert doc["summary"]["score_string"] == "111"

    def test_missing_rubric_exits_1_naming_path(self, workspace, capsys):
        record_grade_tape(workspace)
        code = main(["--backend", "replay", "--tape-dir", "tapes", "grade", "sub.ipynb", "missing.json"])
        assert code == 1
        assert "missing.json" in capsys.readouterr().err

    def test_tape_miss_exits_2_with_partial_transcript(self, workspace, capsys):
        tape = record_grade_tape(workspace)
        save_tape(tape[:3], workspace / "tapes" / "grade.json")
        code = main(
            ["--backend", "replay", "--tape-dir", "tapes", "--transcript-dir", "transcripts",
             "grade", "sub.ipynb", "ml.rubric.json"]
        )
        assert code == 2
        transcript = json.loads(next((workspace / "transcripts").glob("*.json")).read_text())
        completed = [e["stage"] for e in transcript["entries"] if e["response"] is not None]
        assert completed == ["interpret", "analyze", "stream:execution"]

    def test_unknown_tape_dir_exits_1(self, workspace, capsys):
        code = main(["--backend", "replay", "--tape-dir", "nowhere", "grade", "sub.ipynb", "ml.rubric.json"])
        assert code == 1


class TestBatch:
    def test_batch_writes_per_sample_results(self, workspace):
        record_grade_tape(workspace)
        code = main(
            ["--backend", "replay", "--tape-dir", "tapes",
             "batch", "manifest.json", "--out-dir", "results"]
        )
        assert code == 0
        doc = json.loads((workspace / "results" / "s1.json").read_text())
        assert doc["summary"]["score_string"] == "111"


class TestEval:
    def test_both_systems_table(self, workspace, capsys):
        record_eval_tape(workspace, rounds=2, repeats=2)
        code = main(
            ["--backend", "replay", "--tape-dir", "tapes",
             "eval", "manifest.json", "--rounds", "2", "--repeats", "2", "--out-dir", "reports"]
        )
        out = capsys.readouterr().out
        assert code == 0
        assert out.splitlines()[0] == "Task | Rubric Item | AGACCI | SLI"
        assert (workspace / "reports" / "metrics_agacci.json").exists()
        assert (workspace / "reports" / "metrics_sli.json").exists()

    def test_rounds_1_marks_std_unavailable(self, workspace, capsys):
        record_eval_tape(workspace, rounds=1, repeats=2)
        code = main(
            ["--backend", "replay", "--tape-dir", "tapes",
             "eval", "manifest.json", "--rounds", "1", "--repeats", "2", "--out-dir", "r1"]
        )
        assert code == 0
        assert "±n/a" in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, workspace, capsys):
        for out_dir in ("runA", "runB"):
            record_eval_tape(workspace, rounds=2, repeats=2)
            assert main(
                ["--backend", "replay", "--tape-dir", "tapes",
                 "eval", "manifest.json", "--rounds", "2", "--repeats", "2", "--out-dir", out_dir]
            ) == 0
        for name in ("metrics_agacci.json", "metrics_sli.json", "comparison_table.txt"):
            assert (workspace / "runA" / name).read_bytes() == (workspace / "runB" / name).read_bytes()


class TestReport:
    def _write_metrics(self, workspace):
        (workspace / "metrics").mkdir()
        for report in table4_fixture_reports():
            path = workspace / "metrics" / f"metrics_{report.system}.json"
            path.write_text(json.dumps(report_to_dict(report)))

    def test_renders_reference_rows(self, workspace, capsys):
        self._write_metrics(workspace)
        code = main(["report", "metrics"])
        out = capsys.readouterr().out
        assert code == 0
        assert "ML | Preprocessing, training, and visualization | 0.7337±0.0978 | 0.1739±0.0178" in out
        assert "NLP3 | Tokenized and parallelized training dataset | 0.9745±0.0102 | 0.9745±0.0102" in out

    def test_empty_directory_exits_1(self, workspace, capsys):
        (workspace / "empty").mkdir()
        assert main(["report", "empty"]) == 1

    def test_duplicate_keys_exit_1(self, workspace, capsys):
        self._write_metrics(workspace)
        agacci = json.loads((workspace / "metrics" / "metrics_agacci.json").read_text())
        (workspace / "metrics" / "metrics_dup.json").write_text(json.dumps(agacci))
        code = main(["report", "metrics"])
        assert code == 1
        assert "duplicate" in capsys.readouterr().err


class _ScriptedModelHandler(BaseHTTPRequestHandler):
    """Stub chat-completions server answering by agent role."""

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        system = body["messages"][0]["content"]
        responder = helpers.happy_responder()

        class _Part:
            def __init__(self, text):
                self.kind = "text"
                self.text = text

        class _Msg:
            def __init__(self, content):
                self.parts = (_Part(content if isinstance(content, str) else content[0]["text"]),)

        fake = [_Msg(m["content"]) for m in body["messages"]]
        text = responder(fake)
        payload = json.dumps({"choices": [{"message": {"content": text}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


class TestRecord:
    def test_record_then_replay(self, workspace, capsys, monkeypatch):
        server = ThreadingHTTPServer(("127.0.0.1", 0), _ScriptedModelHandler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        try:
            monkeypatch.setenv("TEST_API_KEY", "sekrit")
            config = {
                "grader": {
                    "endpoint_url": f"http://127.0.0.1:{server.server_address[1]}",
                    "model_name": "stub",
                    "api_key_env": "TEST_API_KEY",
                },
                "backend": "live",
            }
            (workspace / "config.json").write_text(json.dumps(config))
            code = main(["--config", "config.json", "--tape-dir", "tapes", "record", "sub.ipynb", "ml.rubric.json"])
            assert code == 0
            assert "Score: 111" in capsys.readouterr().out
            # the captured tape replays the same grade without the server
            code = main(["--backend", "replay", "--tape-dir", "tapes", "grade", "sub.ipynb", "ml.rubric.json"])
            assert code == 0
            assert "Score: 111" in capsys.readouterr().out
        finally:
            server.shutdown()
