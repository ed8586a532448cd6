"""Operator CLI: grade one submission, run batches, run experiments, render reports.

Exit codes: 0 success, 1 usage/config errors, 2 runtime pipeline errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .backend import (
    BackendConfig,
    LiveBackend,
    RecordingBackend,
    ReplayBackend,
    load_tape,
    save_tape,
)
from .errors import AgacciError, BackendError, PipelineError
from .harness import (
    load_manifest,
    render_comparison_table,
    report_from_dict,
    report_to_dict,
    run_experiment,
)
from .notebook import parse_notebook
from .orchestrator import (
    PipelineOptions,
    grade_result_to_dict,
    run_batch,
    run_pipeline,
)
from .rubric import load_rubric

USAGE_ERROR = 1
PIPELINE_ERROR = 2


class UsageError(Exception):
    pass


@dataclass
class CliConfig:
    grader: BackendConfig | None = None
    judge: BackendConfig | None = None
    backend: str = "replay"  # live | replay
    tape_dir: Path = Path("tapes")
    transcript_dir: Path | None = None
    report_dir: Path = Path("reports")
    prompt_dir: Path | None = None
    image_mode: str = "text"
    workers: int = 4
    rounds: int = 6
    repeats: int = 20

    def __post_init__(self):
        if self.rounds < 1 or self.repeats < 1:
            raise UsageError("rounds and repeats must be >= 1")


def _backend_config(doc: dict) -> BackendConfig:
    return BackendConfig(
        endpoint_url=doc["endpoint_url"],
        model_name=doc["model_name"],
        temperature=doc.get("temperature", 0.2),
        max_retries=doc.get("max_retries", 3),
        timeout=doc.get("timeout", 60.0),
        api_key_env=doc.get("api_key_env", "OPENAI_API_KEY"),
    )


def load_config(path: str | Path | None, args) -> CliConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
    cfg = CliConfig(
        grader=_backend_config(doc["grader"]) if "grader" in doc else None,
        judge=_backend_config(doc["judge"]) if "judge" in doc else None,
        backend=doc.get("backend", "replay"),
        tape_dir=Path(doc.get("tape_dir", "tapes")),
        transcript_dir=Path(doc["transcript_dir"]) if doc.get("transcript_dir") else None,
        report_dir=Path(doc.get("report_dir", "reports")),
        prompt_dir=Path(doc["prompt_dir"]) if doc.get("prompt_dir") else None,
        image_mode=doc.get("image_mode", "text"),
        workers=doc.get("workers", 4),
        rounds=doc.get("rounds", 6),
        repeats=doc.get("repeats", 20),
    )
    # CLI flags override the config file
    if getattr(args, "backend", None):
        cfg.backend = args.backend
    if getattr(args, "tape_dir", None):
        cfg.tape_dir = Path(args.tape_dir)
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    if getattr(args, "image_mode", None):
        cfg.image_mode = args.image_mode
    if getattr(args, "transcript_dir", None):
        cfg.transcript_dir = Path(args.transcript_dir)
    return cfg


def _replay_backend(tape_dir: Path) -> ReplayBackend:
    if not tape_dir.is_dir():
        raise UsageError(f"tape directory not found: {tape_dir}")
    entries = []
    for tape_path in sorted(tape_dir.glob("*.json")):
        entries.extend(load_tape(tape_path))
    if not entries:
        raise UsageError(f"no tapes in {tape_dir}")
    return ReplayBackend(entries)


def _grader_backend(cfg: CliConfig):
    if cfg.backend == "replay":
        return _replay_backend(cfg.tape_dir)
    if cfg.grader is None:
        raise UsageError("live backend requested but config has no 'grader' section")
    return LiveBackend(cfg.grader)


def _judge_backend(cfg: CliConfig, grader):
    if cfg.backend == "replay":
        return grader  # one merged tape pool serves both
    if cfg.judge is None:
        raise UsageError("live backend requested but config has no 'judge' section")
    return LiveBackend(cfg.judge)


def _pipeline_options(cfg: CliConfig) -> PipelineOptions:
    return PipelineOptions(
        image_mode=cfg.image_mode,
        transcript_dir=cfg.transcript_dir,
        prompt_dir=cfg.prompt_dir,
        deterministic=cfg.backend == "replay",
    )


def _read(path: Path, what: str) -> bytes:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path.read_bytes()


# --- commands ---------------------------------------------------------------

def cmd_grade(cfg: CliConfig, args) -> int:
    nb = parse_notebook(_read(Path(args.notebook), "notebook"), source_id=str(args.notebook))
    rubric = load_rubric(_read(Path(args.rubric), "rubric"))
    backend = _grader_backend(cfg)
    opts = _pipeline_options(cfg)
    try:
        result = run_pipeline(nb, rubric, backend, opts)
    except PipelineError as exc:
        print(f"pipeline failed: {exc}", file=sys.stderr)
        return PIPELINE_ERROR
    if args.out:
        Path(args.out).write_text(
            json.dumps(grade_result_to_dict(result), indent=2), encoding="utf-8"
        )
    print(f"Score: {result.summary.score_string}")
    print(result.summary.comment)
    return 0


def cmd_batch(cfg: CliConfig, args) -> int:
    samples = load_manifest(Path(args.manifest))
    items = []
    for s in samples:
        nb = parse_notebook(Path(s.notebook_ref).read_bytes(), source_id=s.notebook_ref)
        items.append((nb, load_rubric(Path(s.rubric_ref).read_bytes())))
    backend = _grader_backend(cfg)
    results = run_batch(items, backend, _pipeline_options(cfg), worker_limit=cfg.workers)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for sample, result in zip(samples, results):
        path = out_dir / f"{sample.sample_id}.json"
        if isinstance(result, PipelineError):
            failures += 1
            path.write_text(json.dumps({"error": str(result)}, indent=2), encoding="utf-8")
        else:
            path.write_text(
                json.dumps(grade_result_to_dict(result), indent=2), encoding="utf-8"
            )
    print(f"graded {len(results) - failures}/{len(results)} submissions -> {out_dir}")
    return 0 if failures == 0 else PIPELINE_ERROR


def cmd_eval(cfg: CliConfig, args) -> int:
    samples = load_manifest(Path(args.manifest))
    systems = ("agacci", "sli") if args.system == "both" else (args.system,)
    rounds = args.rounds or cfg.rounds
    repeats = args.repeats or cfg.repeats
    backend = _grader_backend(cfg)
    judge = _judge_backend(cfg, backend)
    reports = run_experiment(
        samples,
        backend,
        judge,
        systems=systems,
        rounds=rounds,
        repeats=repeats,
        opts=_pipeline_options(cfg),
    )
    out_dir = Path(args.out_dir or cfg.report_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for system, report in reports.items():
        path = out_dir / f"metrics_{system}.json"
        path.write_text(json.dumps(report_to_dict(report), indent=2), encoding="utf-8")
    table = render_comparison_table(list(reports.values()))
    (out_dir / "comparison_table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_report(cfg: CliConfig, args) -> int:
    result_dir = Path(args.result_dir)
    if not result_dir.is_dir():
        raise UsageError(f"result directory not found: {result_dir}")
    reports = []
    for path in sorted(result_dir.glob("metrics_*.json")):
        reports.append(report_from_dict(json.loads(path.read_text(encoding="utf-8"))))
    if not reports:
        raise UsageError(f"no metrics files in {result_dir}")
    try:
        table = render_comparison_table(reports)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_record(cfg: CliConfig, args) -> int:
    nb = parse_notebook(_read(Path(args.notebook), "notebook"), source_id=str(args.notebook))
    rubric = load_rubric(_read(Path(args.rubric), "rubric"))
    if cfg.grader is None:
        raise UsageError("record requires a 'grader' section in the config")
    recorder = RecordingBackend(LiveBackend(cfg.grader))
    opts = _pipeline_options(cfg)
    try:
        result = run_pipeline(nb, rubric, recorder, opts)
    except PipelineError as exc:
        print(f"pipeline failed: {exc}", file=sys.stderr)
        return PIPELINE_ERROR
    finally:
        if recorder.tape:
            cfg.tape_dir.mkdir(parents=True, exist_ok=True)
            save_tape(recorder.tape, cfg.tape_dir / f"{Path(args.notebook).stem}.json")
    print(f"Score: {result.summary.score_string}")
    print(f"recorded {len(recorder.tape)} exchanges -> {cfg.tape_dir}")
    return 0


# --- argument parsing -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="agacci", description=__doc__)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--backend", choices=["live", "replay"])
    parser.add_argument("--tape-dir")
    parser.add_argument("--transcript-dir")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--image-mode", choices=["multimodal", "text"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grade", help="grade one notebook against one rubric")
    p.add_argument("notebook")
    p.add_argument("rubric")
    p.add_argument("--out", help="write the grade result JSON here")
    p.set_defaults(fn=cmd_grade)

    p = sub.add_parser("batch", help="grade every submission in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out-dir", default="results")
    p.set_defaults(fn=cmd_batch)

    p = sub.add_parser("eval", help="run the full measurement experiment")
    p.add_argument("manifest")
    p.add_argument("--system", choices=["agacci", "sli", "both"], default="both")
    p.add_argument("--rounds", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="render a comparison table from metrics files")
    p.add_argument("result_dir")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("record", help="grade live and capture a replay tape")
    p.add_argument("notebook")
    p.add_argument("rubric")
    p.set_defaults(fn=cmd_record)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config, args)
        return args.fn(cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (PipelineError, BackendError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return PIPELINE_ERROR
    except AgacciError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
