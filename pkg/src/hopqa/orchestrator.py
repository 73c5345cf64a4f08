"""Simple-QA and multi-hop pipelines, self-reflection, batch and ablation runners."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import yaml

from .core import (
    PLACEHOLDER_RE,
    Attempt,
    CitedAnswer,
    DecompositionPlan,
    Passage,
    PipelineTrace,
    QARecord,
    Question,
    Route,
    StepTrace,
    SubQuestion,
    Verdict,
    dumps_canonical,
    format_history,
    substitute_placeholders,
)
from .errors import ConfigError, DataError, HopQAError, UnparseableRanking
from .evaluation import FLAG_COLUMNS, Judge, MetricsRow, QuestionResult, aggregate, cover_em, safe_judge
from .gateway import Gateway, ModelSpec, PromptTemplate
from .modules import ALIASES, MODULES, ReasoningModules, UsageMeter, canonical_module
from .retrieval import Retriever, RetrieverConfig

log = logging.getLogger(__name__)

SHORT_NAMES = {v: k for k, v in ALIASES.items()}


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class ModuleFlags:
    QD: bool = True
    QC: bool = True
    QR: bool = True
    PR: bool = True
    AV: bool = True
    RD: bool = True
    simple_qa: bool = True

    def as_dict(self) -> dict[str, bool]:
        return {f: getattr(self, f) for f in FLAG_COLUMNS}


@dataclass(frozen=True)
class PipelineConfig:
    label: str = "default"
    enable: ModuleFlags = field(default_factory=ModuleFlags)
    default_model: ModelSpec = field(default_factory=ModelSpec)
    per_module_models: Mapping[str, ModelSpec] = field(default_factory=dict)
    judge: ModelSpec | None = None
    max_reflections: int = 3
    per_step_retries: int = 1
    retrieval: RetrieverConfig = field(default_factory=RetrieverConfig)
    format_retries: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "per_module_models", {canonical_module(k): v for k, v in self.per_module_models.items()}
        )
        self.validate()

    def validate(self) -> None:
        e = self.enable
        if e.QD != e.QC:
            raise ConfigError(
                f"config {self.label!r}: QD and QC must be enabled together "
                "(decomposed sub-questions need construction)"
            )
        if e.QR and not e.AV:
            raise ConfigError(
                f"config {self.label!r}: QR requires AV (rewriting is triggered by a failed verification)"
            )
        if e.simple_qa and not e.AV:
            raise ConfigError(f"config {self.label!r}: simple_qa requires AV (escalation is decided by verification)")
        if self.max_reflections < 0:
            raise ConfigError("max_reflections must be >= 0")
        if self.per_step_retries < 0:
            raise ConfigError("per_step_retries must be >= 0")

    def model_specs(self) -> dict[str, ModelSpec]:
        specs: dict[str, ModelSpec] = {"default": self.default_model, **self.per_module_models}
        if self.judge is not None:
            specs["llm_eval"] = self.judge
        return specs

    def spec_for(self, module: str) -> ModelSpec:
        return self.model_specs().get(canonical_module(module), self.default_model)

    @property
    def all_scripted(self) -> bool:
        return all(s.backend == "scripted" for s in self.model_specs().values())

    def upgrades(self) -> str:
        """Modules whose model differs from the default, as ``QD=name;AV=name``."""
        parts = []
        for m in MODULES:
            spec = self.per_module_models.get(m)
            if spec is not None and spec != self.default_model:
                parts.append(f"{SHORT_NAMES.get(m, m)}={spec.model_name}")
        return ";".join(parts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "modules": self.enable.as_dict(),
            "model": self.default_model.to_dict(),
            "models": {k: v.to_dict() for k, v in sorted(self.per_module_models.items())},
            "judge": self.judge.to_dict() if self.judge else None,
            "max_reflections": self.max_reflections,
            "per_step_retries": self.per_step_retries,
            "retrieval": self.retrieval.to_dict(),
            "format_retries": self.format_retries,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PipelineConfig:
        allowed = {
            "label", "modules", "model", "models", "judge", "max_reflections",
            "per_step_retries", "retrieval", "format_retries",
        }
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        flags_in = dict(d.get("modules") or {})
        bad = set(flags_in) - set(FLAG_COLUMNS)
        if bad:
            raise ConfigError(f"unknown module flags: {sorted(bad)}")
        for k, v in flags_in.items():
            if not isinstance(v, bool):
                raise ConfigError(f"module flag {k} must be true or false")
        base_model = dict(d.get("model") or {})
        default_model = ModelSpec.from_dict(base_model)
        per_module = {
            canonical_module(name): ModelSpec.from_dict({**base_model, **(over or {})})
            for name, over in (d.get("models") or {}).items()
        }
        judge = d.get("judge")
        try:
            max_reflections = int(d.get("max_reflections", 3))
            per_step_retries = int(d.get("per_step_retries", 1))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"max_reflections and per_step_retries must be integers: {exc}") from exc
        fr = d.get("format_retries")
        if fr is not None and (not isinstance(fr, int) or fr < 0):
            raise ConfigError("format_retries must be a non-negative integer")
        return cls(
            label=str(d.get("label", "default")),
            enable=ModuleFlags(**flags_in),
            default_model=default_model,
            per_module_models=per_module,
            judge=ModelSpec.from_dict({**base_model, **judge}) if judge is not None else None,
            max_reflections=max_reflections,
            per_step_retries=per_step_retries,
            retrieval=RetrieverConfig.from_dict(d.get("retrieval") or {}),
            format_retries=fr,
        )


def deep_merge(base: Mapping[str, Any], over: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(base))
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def read_mapping(path: str | Path) -> dict[str, Any]:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return data


def resolve_paths(data: dict[str, Any], base_dir: Path) -> dict[str, Any]:
    """Make file paths inside a config relative to the config file's directory."""
    retrieval = data.get("retrieval")
    if isinstance(retrieval, dict) and retrieval.get("index_path"):
        p = Path(retrieval["index_path"])
        if not p.is_absolute():
            retrieval["index_path"] = str(base_dir / p)
    return data


Adjust = Callable[[dict[str, Any]], dict[str, Any]]


def load_config(
    path: str | Path, overrides: Mapping[str, Any] | None = None, adjust: Adjust | None = None
) -> PipelineConfig:
    """Built-in defaults < config file < ``overrides`` (typically CLI flags).

    ``adjust`` gets the merged mapping last, for overrides that depend on its shape.
    """
    data = deep_merge(resolve_paths(read_mapping(path), Path(path).parent), overrides or {})
    return PipelineConfig.from_dict(adjust(data) if adjust else data)


def load_matrix(
    path: str | Path, overrides: Mapping[str, Any] | None = None, adjust: Adjust | None = None
) -> tuple[list[PipelineConfig], str | None]:
    """Read an ablation matrix: a ``base`` config, a list of ``runs`` overriding it, and a ``baseline`` label."""
    data = read_mapping(path)
    base = resolve_paths(dict(data.get("base") or {}), Path(path).parent)
    runs = data.get("runs")
    if not isinstance(runs, list) or not runs:
        raise ConfigError(f"{path}: 'runs' must be a non-empty list")
    configs = []
    for i, run in enumerate(runs):
        if not isinstance(run, dict) or "label" not in run:
            raise ConfigError(f"{path}: run {i} needs a label")
        merged = deep_merge(deep_merge(base, resolve_paths(dict(run), Path(path).parent)), overrides or {})
        configs.append(PipelineConfig.from_dict(adjust(merged) if adjust else merged))
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"{path}: run labels must be unique")
    baseline = data.get("baseline")
    if baseline is not None and baseline not in labels:
        raise ConfigError(f"{path}: baseline {baseline!r} is not one of the runs")
    return configs, baseline


def load_dataset(path: str | Path) -> list[Question]:
    """Read JSONL lines ``{id, question, answers: [...]}``."""
    questions = []
    seen = set()
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {path}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected an object")
            for key in ("id", "question", "answers"):
                if key not in obj:
                    raise DataError(f"{path}:{lineno}: missing {key!r}")
            answers = obj["answers"]
            if not isinstance(answers, list) or not answers or not all(isinstance(a, str) for a in answers):
                raise DataError(f"{path}:{lineno}: 'answers' must be a non-empty list of strings")
            qid = str(obj["id"])
            if qid in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {qid!r}")
            seen.add(qid)
            try:
                questions.append(Question(obj["question"], qid, tuple(answers)))
            except HopQAError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not questions:
        raise DataError(f"{path}: dataset is empty")
    return questions


# -- pipelines --------------------------------------------------------------


def _literal(text: str) -> str:
    """Neutralize ``#n`` tokens that are part of content rather than back-references."""
    return PLACEHOLDER_RE.sub(lambda m: f"number {m.group(1)}", text)


def _frozen_clock() -> float:
    return 0.0


def cited_union(steps: Sequence[StepTrace]) -> list[Passage]:
    """Passages cited by the accepted answer of each step, in step order, one per doc."""
    out: list[Passage] = []
    seen: set[str] = set()
    for step in steps:
        answer = step.record.answer
        if not step.step_verdict.accepted or answer.is_abstention:
            continue
        for p in step.retrieved:
            if p.local_id in answer.citations and p.doc_id not in seen:
                seen.add(p.doc_id)
                out.append(p)
    return out


class _Solve:
    """State of one question's run: its meter and the attempts so far."""

    def __init__(self, pipeline: Pipeline, q: Question) -> None:
        self.p = pipeline
        self.cfg = pipeline.cfg
        self.q = q
        self.meter = UsageMeter()
        self.m = pipeline.modules.with_meter(self.meter)
        self.attempts: list[Attempt] = []
        self.simple: Attempt | None = None

    # one sub-question: construct -> decide -> retrieve/rerank -> answer -> verify, with retries
    def step(self, sub: SubQuestion, query: str, background: str, construct_fallback: bool) -> StepTrace:
        e = self.cfg.enable
        needed = self.m.decide_retrieval(query).needed if e.RD else True
        retries_allowed = self.cfg.per_step_retries if e.QR and e.AV else 0
        rewrites: list[str] = []
        rejected: list[CitedAnswer] = []
        notes: list[str] = []
        passages: list[Passage] = []
        order: tuple[int, ...] = ()
        answer = CitedAnswer.abstention()
        reasoning = ""
        verdict = Verdict(False, "not attempted")
        for i in range(1 + retries_allowed):
            search = query
            if i > 0:
                search = self.m.rewrite_query(query, rewrites[-1] if rewrites else None)
                rewrites.append(search)
            # a failed step that skipped retrieval gets evidence on retry
            passages = self.p.retriever.retrieve(search, self.cfg.retrieval.top_k) if needed or i > 0 else []
            context = passages
            order = ()
            if e.PR and passages:
                try:
                    ranked = self.m.rerank(search, passages)
                    order = ranked.order
                    context = ranked.apply(passages)
                except UnparseableRanking as exc:
                    notes.append(f"rerank unparseable, kept retrieval order: {exc}")
                    order = tuple(p.local_id for p in passages[:10])
                    context = passages[:10]
            answer, reasoning = self.m.answer(query, context, background)
            if answer.uncited and passages:
                notes.append("answer carries no citation")
            verdict = self.m.verify(query, answer, context) if e.AV else Verdict(True, "verification disabled")
            if verdict.accepted:
                break
            rejected.append(answer)
        final_answer = answer if verdict.accepted else CitedAnswer.abstention()
        record = QARecord(sub.resolved(query), reasoning, final_answer)
        return StepTrace(
            step_index=sub.index,
            constructed_query=query,
            retrieval_needed=needed,
            rewrites=tuple(rewrites),
            retrieved=tuple(passages),
            reranked_order=order,
            record=record,
            step_verdict=verdict,
            retries_used=len(rewrites),
            construct_fallback=construct_fallback,
            rejected_answers=tuple(rejected),
            notes=tuple(notes),
        )

    def multihop(self, plan: DecompositionPlan | None, generation: int) -> Attempt:
        q = self.q
        if plan is None:
            if self.cfg.enable.QD:
                plan = self.m.decompose(q)
            else:
                plan = DecompositionPlan(q, "", (), generation)
        if plan.generation != generation:
            plan = replace(plan, generation=generation)

        steps: list[StepTrace] = []
        if plan.is_simple:
            query = _literal(q.text)
            step = self.step(SubQuestion(1, query), query, "none", False)
            steps.append(step)
            final, final_reasoning = step.record.answer, step.record.reasoning
        else:
            history: list[QARecord] = []
            for sub in plan.subs:
                if self.cfg.enable.QC:
                    text, fallback = self.m.construct(q, history, sub)
                else:
                    text, fallback = substitute_placeholders(sub, history), False
                text = _literal(text)
                background = f"Original Question: {q.text}"
                if history:
                    background += "\n\n" + format_history(history)
                step = self.step(sub, text, background, fallback)
                steps.append(step)
                history.append(step.record)
            final, final_reasoning = self.m.finalize(q, history)

        verdict = self.m.verify_final(q, final, cited_union(steps))
        return Attempt(plan, tuple(steps), final, verdict, final_reasoning, None, self.meter.total)

    def reflect_loop(self, plan: DecompositionPlan | None = None, max_reflections: int | None = None) -> None:
        budget = self.cfg.max_reflections if max_reflections is None else max_reflections
        sentinel_used = False
        for k in range(budget + 1):
            attempt = self.multihop(plan, k)
            self.attempts.append(attempt)
            if attempt.verdict.accepted or k == budget or not self.cfg.enable.QD:
                return
            analysis = self.m.improve_analysis(self.q, self.attempts)
            self.attempts[-1] = replace(attempt, analysis=analysis.text)
            if analysis.appropriate and not sentinel_used:
                sentinel_used = True
                plan = attempt.plan
            else:
                plan = self.m.improve_decomposition(self.q, [(a.plan, a.analysis or "") for a in self.attempts])

    def simple_path(self) -> Attempt:
        """Retrieve, answer with no background, verify."""
        q = self.q
        query = _literal(q.text)
        passages = self.p.retriever.retrieve(query, self.cfg.retrieval.top_k)
        answer, reasoning = self.m.answer(query, passages, "none")
        verdict = self.m.verify(query, answer, passages)
        step = StepTrace(
            step_index=1,
            constructed_query=query,
            retrieval_needed=True,
            rewrites=(),
            retrieved=tuple(passages),
            reranked_order=(),
            record=QARecord(SubQuestion(1, query, query), reasoning, answer),
            step_verdict=verdict,
            rejected_answers=() if verdict.accepted else (answer,),
        )
        plan = DecompositionPlan(q, "", (), 0)
        return Attempt(plan, (step,), answer, verdict, reasoning, None, self.meter.total)


class Pipeline:
    """Runs questions through the configured modules.

    ``clock`` measures wall time; when every model is scripted it defaults to a
    frozen clock so that replayed traces are byte-identical.
    """

    def __init__(
        self,
        cfg: PipelineConfig,
        gateway: Gateway,
        retriever: Retriever,
        templates: Mapping[str, PromptTemplate] | None = None,
        clock: Callable[[], float] | None = None,
    ) -> None:
        cfg.validate()
        self.cfg = cfg
        self.retriever = retriever
        self.modules = ReasoningModules(
            gateway,
            cfg.model_specs(),
            templates,
            format_retries=cfg.format_retries,
            passage_char_budget=cfg.retrieval.passage_char_budget,
        )
        if clock is None:
            clock = _frozen_clock if cfg.all_scripted else time.perf_counter
        self.clock = clock

    def _finish(self, run: _Solve, route: Route, start: float, error: str | None = None) -> PipelineTrace:
        last = run.attempts[-1] if run.attempts else run.simple
        verified = error is None and last is not None and last.verdict.accepted
        return PipelineTrace(
            question=run.q,
            attempts=tuple(run.attempts),
            route=route,
            token_usage=run.meter.total,
            wall_time=round(max(0.0, self.clock() - start), 6),
            simple_attempt=run.simple,
            verified=verified,
            calls=run.meter.calls,
            models=run.m.model_names(),
            approximate_tokens=run.meter.approximate,
            error=error,
        )

    def _guarded(self, q: Question, body: Callable[[_Solve], Route], default_route: Route) -> PipelineTrace:
        run = _Solve(self, q)
        start = self.clock()
        route = default_route
        try:
            route = body(run)
        except HopQAError as exc:
            log.warning("question %s failed: %s", q.id, exc)
            if run.simple is not None and not run.simple.verdict.accepted:
                route = Route.SIMPLE_ESCALATED
            return self._finish(run, route, start, error=f"{exc.__class__.__name__}: {exc}")
        return self._finish(run, route, start)

    def solve(self, q: Question) -> PipelineTrace:
        """Full engine: simple path when enabled, then multi-hop with self-reflection."""
        if self.cfg.enable.simple_qa:
            return self.run_simple(q)

        def body(run: _Solve) -> Route:
            run.reflect_loop()
            return Route.MULTIHOP

        return self._guarded(q, body, Route.MULTIHOP)

    def run_simple(self, q: Question) -> PipelineTrace:
        """Simple path; on a rejected verdict, escalate to the reflective multi-hop loop."""
        if not self.cfg.enable.simple_qa:
            raise ConfigError("run_simple requires simple_qa to be enabled")

        def body(run: _Solve) -> Route:
            run.simple = run.simple_path()
            if run.simple.verdict.accepted:
                return Route.SIMPLE
            run.reflect_loop()
            return Route.SIMPLE_ESCALATED

        return self._guarded(q, body, Route.SIMPLE)

    def run_multihop(self, q: Question, plan: DecompositionPlan | None = None) -> PipelineTrace:
        """Exactly one multi-hop attempt, with final verification but no reflection."""

        def body(run: _Solve) -> Route:
            run.reflect_loop(plan, max_reflections=0)
            return Route.MULTIHOP

        return self._guarded(q, body, Route.MULTIHOP)


# -- batch ------------------------------------------------------------------


def _safe_name(qid: str) -> str:
    name = re.sub(r"[^A-Za-z0-9._-]", "_", qid)
    if name != qid:
        name += "-" + hashlib.sha1(qid.encode()).hexdigest()[:8]
    return name


class TraceStore:
    """Writes one canonical JSON trace file per question; safe to share between threads."""

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self._lock = threading.Lock()

    def path_for(self, qid: str) -> Path:
        return self.directory / f"{_safe_name(qid)}.json"

    def write(self, trace: PipelineTrace) -> Path:
        path = self.path_for(trace.question.id)
        text = trace.to_json()
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        return path


def _crash_trace(q: Question, exc: BaseException) -> PipelineTrace:
    return PipelineTrace(q, (), Route.MULTIHOP, 0, 0.0, error=f"{exc.__class__.__name__}: {exc}")


def run_batch(
    pipeline: Pipeline,
    questions: Sequence[Question],
    parallel: int = 1,
    store: TraceStore | None = None,
) -> list[PipelineTrace]:
    """Solve many questions with at most ``parallel`` in flight; results keep input order."""
    if parallel < 1:
        raise ConfigError("parallel must be >= 1")

    def one(q: Question) -> PipelineTrace:
        try:
            trace = pipeline.solve(q)
        except Exception as exc:  # one broken question must not sink the batch
            log.exception("unexpected failure on question %s", q.id)
            trace = _crash_trace(q, exc)
        if store is not None:
            store.write(trace)
        return trace

    if parallel == 1:
        return [one(q) for q in questions]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(one, questions))


# -- evaluation runs --------------------------------------------------------


@dataclass
class AblationResult:
    rows: list[MetricsRow]
    traces: dict[str, list[PipelineTrace]]
    results: dict[str, list[QuestionResult]]


def score_traces(traces: Iterable[PipelineTrace], judge: Judge) -> list[QuestionResult]:
    out = []
    for trace in traces:
        q = trace.question
        prediction = trace.final_answer.text
        assert q.gold_answers
        hit, judge_error = safe_judge(judge, q, prediction)
        out.append(
            QuestionResult(
                question_id=q.id,
                prediction=prediction,
                cover_em=cover_em(prediction, q.gold_answers),
                llm_eval=hit,
                token_usage=trace.token_usage,
                wall_time=trace.wall_time,
                error=trace.error or judge_error,
            )
        )
    return out


def run_ablation(
    dataset: Sequence[Question],
    configs: Sequence[PipelineConfig],
    *,
    gateway: Gateway,
    retriever: Retriever | Callable[[RetrieverConfig], Retriever],
    judge: Judge,
    baseline: str | None = None,
    parallel: int = 1,
    out_dir: str | Path | None = None,
    templates: Mapping[str, PromptTemplate] | None = None,
) -> AblationResult:
    """One metrics row per config; deltas are taken against the ``baseline`` row (default: first)."""
    if not dataset:
        raise DataError("ablation needs a non-empty dataset")
    if not configs:
        raise ConfigError("ablation needs at least one config")
    for c in configs:
        c.validate()
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        raise ConfigError("config labels must be unique")
    baseline = baseline if baseline is not None else labels[0]
    if baseline not in labels:
        raise ConfigError(f"baseline {baseline!r} is not among the configs")

    rows: list[MetricsRow] = []
    all_traces: dict[str, list[PipelineTrace]] = {}
    all_results: dict[str, list[QuestionResult]] = {}
    for cfg in configs:
        r = retriever(cfg.retrieval) if callable(retriever) and not hasattr(retriever, "retrieve") else retriever
        pipeline = Pipeline(cfg, gateway, r, templates)  # type: ignore[arg-type]
        store = TraceStore(Path(out_dir) / "traces" / _safe_name(cfg.label)) if out_dir is not None else None
        traces = run_batch(pipeline, dataset, parallel, store)
        results = score_traces(traces, judge)
        all_traces[cfg.label] = traces
        all_results[cfg.label] = results
        rows.append(aggregate(results, cfg.label, cfg.enable.as_dict(), cfg.upgrades()))
    base_row = rows[labels.index(baseline)]
    rows = [row.with_baseline(base_row) for row in rows]
    if out_dir is not None:
        write_results(Path(out_dir), all_results)
    return AblationResult(rows, all_traces, all_results)


def write_results(out_dir: Path, results: Mapping[str, Sequence[QuestionResult]]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "results.jsonl", "w", encoding="utf-8") as fh:
        for label, rs in results.items():
            for r in rs:
                row = {
                    "config": label,
                    "question_id": r.question_id,
                    "prediction": r.prediction,
                    "cover_em": r.cover_em,
                    "llm_eval": r.llm_eval,
                    "token_usage": r.token_usage,
                    "wall_time": r.wall_time,
                    "error": r.error,
                }
                fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


__all__ = [
    "AblationResult",
    "ModuleFlags",
    "Pipeline",
    "PipelineConfig",
    "TraceStore",
    "cited_union",
    "deep_merge",
    "dumps_canonical",
    "load_config",
    "load_dataset",
    "load_matrix",
    "run_ablation",
    "run_batch",
    "score_traces",
]
