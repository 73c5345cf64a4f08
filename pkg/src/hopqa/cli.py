"""Command-line entry points: ingest, ask, eval, ablate, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 backend error.
Option precedence: command-line flags, then the config file, then built-in defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import secrets
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from .core import PipelineTrace, Question, validate_trace_dict
from .errors import ConfigError, DataError, EmptyGold, GatewayError, HopQAError, MissingJudgment, RetrievalError
from .evaluation import Judge, JudgmentCache, format_table, metrics_csv, read_metrics_csv
from .gateway import Gateway, ScriptedBackend, load_templates, templates_digest
from .modules import ReasoningModules
from .orchestrator import (
    Pipeline,
    PipelineConfig,
    TraceStore,
    load_config,
    load_dataset,
    load_matrix,
    run_ablation,
)
from .retrieval import Retriever, RetrieverConfig, ingest, make_retriever

log = logging.getLogger("hopqa")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_BACKEND = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, RetrievalError, EmptyGold, MissingJudgment, FileNotFoundError)):
        return EXIT_DATA
    if isinstance(exc, GatewayError):
        return EXIT_BACKEND
    return 1


@dataclass
class RunManifest:
    run_id: str
    command: str
    config_path: str | None
    config_hash: str | None
    dataset_path: str | None
    started_at: str
    finished_at: str | None
    templates_digest: str
    script_path: str | None = None
    parallel: int = 1
    judge_calls: int | None = None

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifests" / f"{self.run_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def new_run_id(out_dir: Path) -> str:
    while True:
        run_id = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S") + "-" + secrets.token_hex(3)
        if not (out_dir / "manifests" / f"{run_id}.json").exists():
            return run_id


def config_hash(configs: Sequence[PipelineConfig]) -> str:
    joined = "\n".join(c.digest() for c in configs)
    return hashlib.sha256(joined.encode()).hexdigest()


# -- shared plumbing --------------------------------------------------------


def _flag_adjuster(args: argparse.Namespace):
    """Apply --backend to every model entry of a merged config mapping."""
    backend = getattr(args, "backend", None)

    def adjust(data: dict[str, Any]) -> dict[str, Any]:
        if backend is None:
            return data
        entries = [data.setdefault("model", {})]
        entries += [m for m in (data.get("models") or {}).values() if isinstance(m, dict)]
        if isinstance(data.get("judge"), dict):
            entries.append(data["judge"])
        for entry in entries:
            entry["backend"] = backend
            if backend == "scripted":
                entry["endpoint"] = None
        return data

    return adjust


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if getattr(args, "max_reflections", None) is not None:
        out["max_reflections"] = args.max_reflections
    return out


def _gateway(configs: Sequence[PipelineConfig], script: str | None) -> Gateway:
    needs_script = any(s.backend == "scripted" for c in configs for s in c.model_specs().values())
    if not needs_script:
        return Gateway()
    if script is None:
        raise ConfigError("the scripted backend needs --script <path>")
    try:
        return Gateway(scripted=ScriptedBackend.from_file(script))
    except FileNotFoundError as exc:
        raise ConfigError(f"script not found: {script}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"script {script} is not valid JSON: {exc}") from exc


def _retriever_factory():
    cache: dict[RetrieverConfig, Retriever] = {}

    def get(cfg: RetrieverConfig) -> Retriever:
        if cfg not in cache:
            cache[cfg] = make_retriever(cfg)
        return cache[cfg]

    return get


def _judge(cfg: PipelineConfig, gateway: Gateway, out_dir: Path) -> Judge:
    modules = ReasoningModules(gateway, cfg.model_specs(), format_retries=cfg.format_retries)
    return Judge(modules, JudgmentCache(out_dir / "judgments.jsonl"))


def _yes(flag: bool) -> str:
    return "yes" if flag else "no"


def summarize(trace: PipelineTrace) -> str:
    lines = [
        f"route: {trace.route.value}  attempts: {len(trace.attempts)}  verified: {_yes(trace.verified)}  "
        f"tokens: {trace.token_usage}{' (approx.)' if trace.approximate_tokens else ''}"
    ]
    if trace.simple_attempt is not None:
        v = trace.simple_attempt.verdict
        lines.append(f"simple path: {trace.simple_attempt.final.text}  ({'accepted' if v.accepted else 'rejected'})")
    for n, attempt in enumerate(trace.attempts):
        lines.append(f"attempt {n}: {len(attempt.plan.subs)} sub-question(s)")
        for step in attempt.steps:
            status = "accepted" if step.step_verdict.accepted else "rejected"
            retries = f", {step.retries_used} rewrite(s)" if step.retries_used else ""
            lines.append(f"  [{step.step_index}] {step.constructed_query} -> {step.record.answer.text}  ({status}{retries})")
        lines.append(f"  final: {attempt.final.text}  ({'accepted' if attempt.verdict.accepted else 'rejected'})")
    if trace.error:
        lines.append(f"error: {trace.error}")
    lines.append(f"answer: {trace.final_answer.text}")
    return "\n".join(lines)


# -- commands ---------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    _, count = ingest(args.corpus, args.index)
    print(count)
    return EXIT_OK


def cmd_ask(args: argparse.Namespace) -> int:
    started = _now()
    out_dir = Path(args.out_dir)
    cfg = load_config(args.config, _overrides(args), _flag_adjuster(args))
    gateway = _gateway([cfg], args.script)
    retriever = make_retriever(cfg.retrieval)
    templates = load_templates()
    trace = Pipeline(cfg, gateway, retriever, templates).solve(Question(args.question, args.id))
    validate_trace_dict(json.loads(trace.to_json()))
    path = TraceStore(out_dir / "traces").write(trace)
    print(summarize(trace))
    print(f"trace: {path}")
    RunManifest(
        run_id=new_run_id(out_dir),
        command="ask",
        config_path=str(args.config),
        config_hash=config_hash([cfg]),
        dataset_path=None,
        started_at=started,
        finished_at=_now(),
        templates_digest=templates_digest(templates),
        script_path=args.script,
    ).write(out_dir)
    return EXIT_BACKEND if trace.error else EXIT_OK


def _run_matrix(
    args: argparse.Namespace, command: str, configs: list[PipelineConfig], baseline: str | None
) -> int:
    started = _now()
    out_dir = Path(args.out_dir)
    if args.parallel < 1:
        raise ConfigError("--parallel must be >= 1")
    dataset = load_dataset(args.dataset)
    gateway = _gateway(configs, args.script)
    templates = load_templates()
    base_cfg = next((c for c in configs if c.label == baseline), configs[0])
    judge = _judge(base_cfg, gateway, out_dir)
    result = run_ablation(
        dataset,
        configs,
        gateway=gateway,
        retriever=_retriever_factory(),
        judge=judge,
        baseline=baseline,
        parallel=args.parallel,
        out_dir=out_dir,
        templates=templates,
    )
    csv_text = metrics_csv(result.rows)
    (out_dir / "metrics.csv").write_text(csv_text, encoding="utf-8")
    table = format_table(result.rows)
    (out_dir / "metrics.txt").write_text(table, encoding="utf-8")
    failures = sum(1 for rs in result.results.values() for r in rs if r.error)
    print(table, end="")
    print(f"questions: {len(dataset)}  configs: {len(configs)}  failures: {failures}  judge calls: {judge.calls}")
    print(f"metrics: {out_dir / 'metrics.csv'}")
    RunManifest(
        run_id=new_run_id(out_dir),
        command=command,
        config_path=str(args.config),
        config_hash=config_hash(configs),
        dataset_path=str(args.dataset),
        started_at=started,
        finished_at=_now(),
        templates_digest=templates_digest(templates),
        script_path=args.script,
        parallel=args.parallel,
        judge_calls=judge.calls,
    ).write(out_dir)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _overrides(args), _flag_adjuster(args))
    return _run_matrix(args, "eval", [cfg], cfg.label)


def cmd_ablate(args: argparse.Namespace) -> int:
    configs, baseline = load_matrix(args.config, _overrides(args), _flag_adjuster(args))
    return _run_matrix(args, "ablate", configs, baseline)


def cmd_report(args: argparse.Namespace) -> int:
    path = Path(args.metrics)
    if path.is_dir():
        path = path / "metrics.csv"
    try:
        rows = read_metrics_csv(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"no metrics file at {path}") from exc
    if args.sort:
        rows.sort(key=lambda r: r.get("config", ""))
    print(format_table(rows), end="")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hopqa", description="Modular multi-hop retrieval-augmented QA.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a BM25 index from a JSONL corpus")
    p.add_argument("corpus")
    p.add_argument("--index", required=True, help="where to write the index file")
    p.set_defaults(func=cmd_ingest)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True)
        p.add_argument("--out-dir", default="hopqa-out")
        p.add_argument("--max-reflections", type=int)
        p.add_argument("--backend", choices=("scripted", "http"))
        p.add_argument("--script", help="JSON file of scripted responses")

    p = sub.add_parser("ask", help="answer one question and write its trace")
    p.add_argument("question")
    p.add_argument("--id", default="ask")
    common(p)
    p.set_defaults(func=cmd_ask)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate one config on a dataset"),
        ("ablate", cmd_ablate, "run a config matrix on a dataset"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("dataset")
        common(p)
        p.add_argument("--parallel", type=int, default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="render a metrics CSV as a text table")
    p.add_argument("metrics", help="metrics.csv or a run output directory")
    p.add_argument("--sort", action="store_true", help="order rows by config label")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (HopQAError, FileNotFoundError) as exc:
        print(f"hopqa {args.command}: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
