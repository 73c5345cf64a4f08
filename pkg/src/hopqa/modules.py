"""Prompt-backed reasoning modules.

Each module renders its template, calls the gateway with its own ModelSpec,
and parses the labeled output into domain types. Modules hold no per-question
state; token usage is reported to the UsageMeter bound with ``with_meter``.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, TypeVar

from .core import (
    PLACEHOLDER_RE,
    Attempt,
    CallRecord,
    CitedAnswer,
    DecompositionPlan,
    Passage,
    PipelineTrace,
    QARecord,
    Question,
    SubQuestion,
    Verdict,
    check_batch,
    extract_citations,
    format_history,
    placeholders,
    substitute_placeholders,
)
from .errors import (
    ConfigError,
    FormatError,
    MalformedPlan,
    MissingAntecedent,
    MissingField,
    PreconditionError,
    UnparseableBoolean,
    UnparseableRanking,
    ValidationError,
)
from .gateway import Gateway, ModelSpec, PromptTemplate, load_templates, parse_fields, render
from .retrieval import fit_passages

log = logging.getLogger(__name__)

T = TypeVar("T")

MODULES = (
    "decompose",
    "construct",
    "decide_retrieval",
    "rewrite_query",
    "rerank",
    "answer",
    "verify",
    "finalize",
    "improve_analysis",
    "improve_decomposition",
    "verify_final",
    "llm_eval",
)

# Short names used in ablation tables and config files.
ALIASES = {
    "QD": "decompose",
    "QC": "construct",
    "RD": "decide_retrieval",
    "QR": "rewrite_query",
    "PR": "rerank",
    "AG": "answer",
    "AV": "verify",
    "FA": "finalize",
    "FV": "verify_final",
    "IA": "improve_analysis",
    "ID": "improve_decomposition",
    "EVAL": "llm_eval",
}

APPROPRIATE_SENTINEL = "The previous decomposition is appropriate."
RERANK_LIMIT = 10
FORMAT_REMINDER = (
    "\n\nYour previous reply did not follow the required output format. "
    "Reply again and follow the output format exactly: start each output field on its own line "
    "with its label followed by a colon."
)

_NUMBERED = re.compile(r"^\s*(\d+)\s*[.)]\s*(.*?)\s*$")
_BRACKET_ID = re.compile(r"\[(\d+)\]")


def canonical_module(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in MODULES:
        raise ConfigError(f"unknown module {name!r}")
    return name


class UsageMeter:
    """Collects one CallRecord per completion."""

    def __init__(self) -> None:
        self._calls: list[CallRecord] = []
        self._lock = threading.Lock()

    def record(self, call: CallRecord) -> None:
        with self._lock:
            self._calls.append(call)

    @property
    def calls(self) -> tuple[CallRecord, ...]:
        with self._lock:
            return tuple(self._calls)

    @property
    def total(self) -> int:
        return sum(c.total for c in self.calls)

    @property
    def approximate(self) -> bool:
        return any(c.approximate for c in self.calls)


@dataclass(frozen=True)
class RetrievalDecision:
    needed: bool
    analysis: str


@dataclass(frozen=True)
class RerankResult:
    reasoning: str
    order: tuple[int, ...]

    def apply(self, batch: Sequence[Passage]) -> list[Passage]:
        by_id = {p.local_id: p for p in batch}
        return [by_id[i] for i in self.order]


@dataclass(frozen=True)
class Analysis:
    text: str
    appropriate: bool


class _NonProgress(FormatError):
    pass


class _RepeatedPlan(FormatError):
    def __init__(self, plan: DecompositionPlan) -> None:
        super().__init__("new decomposition repeats an earlier one")
        self.plan = plan


def parse_bool(value: str) -> bool:
    """The one true/false reader shared by every boolean-valued module."""
    v = value.strip().strip("\"'`*").rstrip(".").strip().lower()
    if v == "true":
        return True
    if v == "false":
        return False
    raise UnparseableBoolean(f"expected true or false, got {value!r}")


def parse_plan(question: Question, reasoning: str, output: str, generation: int = 0) -> DecompositionPlan:
    body = output.strip()
    if body.strip("\"'`*").rstrip(".").strip().lower() == "none":
        return DecompositionPlan(question, reasoning, (), generation)
    items: list[list] = []
    for line in body.splitlines():
        m = _NUMBERED.match(line)
        if m:
            items.append([int(m.group(1)), m.group(2)])
        elif line.strip() and items:
            items[-1][1] = f"{items[-1][1]} {line.strip()}".strip()
    if not items:
        raise MalformedPlan(f"no numbered sub-questions in {body[:120]!r}")
    numbers = [n for n, _ in items]
    if numbers != list(range(1, len(items) + 1)):
        raise MalformedPlan(f"sub-questions must be numbered 1..n without gaps, got {numbers}")
    try:
        subs = []
        for n, text in items:
            if not text:
                raise MalformedPlan(f"sub-question {n} is empty")
            subs.append(SubQuestion(n, text))
        return DecompositionPlan(question, reasoning, tuple(subs), generation)
    except ValidationError as exc:
        raise MalformedPlan(str(exc)) from exc


def repair_ranking(ids: Sequence[int], batch_ids: Sequence[int]) -> list[int]:
    """Turn a noisy model ranking into a clean one over ``batch_ids``.

    Unknown ids are dropped, repeats keep their first position, the list is
    cut at ten, and any shortfall is filled with unranked ids in retrieval
    order. The result always has ``min(10, len(batch_ids))`` distinct ids.
    """
    limit = min(RERANK_LIMIT, len(batch_ids))
    known = set(batch_ids)
    order: list[int] = []
    seen: set[int] = set()
    for i in ids:
        if len(order) == limit:
            break
        if i in known and i not in seen:
            order.append(i)
            seen.add(i)
    for i in batch_ids:
        if len(order) == limit:
            break
        if i not in seen:
            order.append(i)
            seen.add(i)
    return order


def format_passages(passages: Sequence[Passage], renumber: bool = False) -> str:
    if not passages:
        return "none"
    blocks = []
    for pos, p in enumerate(passages, start=1):
        ident = pos if renumber else p.local_id
        head = f"[{ident}] {p.title}".rstrip()
        blocks.append(f"{head}\n{p.text}")
    return "\n\n".join(blocks)


def format_solving_record(attempt: Attempt) -> str:
    lines = ["Original decomposition:", attempt.plan.numbered()]
    lines.append("")
    lines.append("Solving process:")
    for step in attempt.steps:
        k = step.step_index
        lines.append(f"Rewritten Question #{k}: {step.constructed_query}")
        lines.append(f"Reasoning #{k}: {step.record.reasoning.strip()}")
        lines.append(f"Answer #{k}: {step.record.answer.text.strip()}")
    lines.append("")
    lines.append(f"Final answer: {attempt.final.text.strip()}")
    return "\n".join(lines)


class ReasoningModules:
    """The prompt modules, each bound to its own ModelSpec.

    ``models`` is either one spec shared by every module or a mapping from
    module name (or alias such as ``"QD"``) to spec, with ``"default"`` as
    the fallback. ``format_retries`` is the number of re-prompts after an
    unparseable reply; by default live backends get one and scripted
    backends none.
    """

    def __init__(
        self,
        gateway: Gateway,
        models: ModelSpec | Mapping[str, ModelSpec] | None = None,
        templates: Mapping[str, PromptTemplate] | None = None,
        meter: UsageMeter | None = None,
        format_retries: int | None = None,
        passage_char_budget: int | None = None,
    ) -> None:
        self.gateway = gateway
        if models is None:
            models = ModelSpec()
        if isinstance(models, ModelSpec):
            self._default = models
            self._models: dict[str, ModelSpec] = {}
        else:
            self._default = models.get("default", ModelSpec())
            self._models = {canonical_module(k): v for k, v in models.items() if k != "default"}
        self.templates = dict(templates) if templates is not None else load_templates()
        self.meter = meter
        self.format_retries = format_retries
        self.passage_char_budget = passage_char_budget

    def with_meter(self, meter: UsageMeter) -> ReasoningModules:
        clone = object.__new__(ReasoningModules)
        clone.__dict__.update(self.__dict__)
        clone.meter = meter
        return clone

    def model_for(self, module: str) -> ModelSpec:
        return self._models.get(canonical_module(module), self._default)

    def model_names(self) -> dict[str, str]:
        return {m: self.model_for(m).model_name for m in MODULES}

    # -- plumbing --

    def _retries(self, spec: ModelSpec) -> int:
        if self.format_retries is not None:
            return self.format_retries
        return 1 if spec.is_live else 0

    def _run(
        self,
        module: str,
        bindings: Mapping[str, str],
        parse: Callable[[str], T],
        soft: type[FormatError] | None = None,
    ) -> T:
        """Render, complete and parse, re-prompting on format errors.

        Errors of type ``soft`` are remembered: if every try fails, the first
        soft error is raised in preference to the last hard one.
        """
        spec = self.model_for(module)
        prompt = render(self.templates[module], bindings)
        tries = 1 + self._retries(spec)
        first_soft: FormatError | None = None
        last: FormatError | None = None
        for i in range(tries):
            completion = self.gateway.complete(spec, prompt if i == 0 else prompt + FORMAT_REMINDER)
            if self.meter is not None:
                self.meter.record(
                    CallRecord(
                        module,
                        spec.model_name,
                        completion.prompt_tokens,
                        completion.completion_tokens,
                        completion.approximate,
                    )
                )
            try:
                return parse(completion.text)
            except FormatError as exc:
                log.info("%s: unparseable reply (%s), try %d/%d", module, exc, i + 1, tries)
                last = exc
                if soft is not None and isinstance(exc, soft) and first_soft is None:
                    first_soft = exc
        assert last is not None
        raise first_soft if first_soft is not None else last

    def _passages(self, passages: Sequence[Passage]) -> list[Passage]:
        return fit_passages(passages, self.passage_char_budget)

    # -- modules --

    def decompose(self, q: Question) -> DecompositionPlan:
        def parse(text: str) -> DecompositionPlan:
            f = parse_fields(text, ["Reasoning", "Output"])
            return parse_plan(q, f["Reasoning"], f["Output"], 0)

        return self._run("decompose", {"Question": q.text}, parse)

    def construct(self, q: Question, history: Sequence[QARecord], sub: SubQuestion) -> tuple[str, bool]:
        """Resolve the placeholders of ``sub``; returns the question and whether the fallback was used.

        A sub-question without placeholders is returned unchanged without a
        model call. Model output that still holds a placeholder is replaced by
        plain substitution of the earlier answers.
        """
        refs = placeholders(sub.template_text)
        if not refs:
            return sub.template_text, False
        known = {rec.sub_question.index for rec in history}
        for k in refs:
            if k not in known:
                raise MissingAntecedent(k)
        bindings = {
            "Original Question": q.text,
            "Question-Answer Pairs": format_history(history) or "none",
            "New Question": sub.template_text,
        }
        text = self._run("construct", bindings, lambda t: parse_fields(t, ["Rewritten Question"])["Rewritten Question"])
        text = " ".join(text.split())
        if not text or PLACEHOLDER_RE.search(text):
            return substitute_placeholders(sub, history), True
        return text, False

    def decide_retrieval(self, q: str) -> RetrievalDecision:
        if not q.strip():
            raise PreconditionError("question is empty")

        def parse(text: str) -> RetrievalDecision:
            f = parse_fields(text, ["Analysis", "Output"])
            return RetrievalDecision(parse_bool(f["Output"]), f["Analysis"])

        return self._run("decide_retrieval", {"Question": q}, parse)

    def rewrite_query(self, q: str, last: str | None = None) -> str:
        def key(s: str) -> str:
            return " ".join(s.split()).casefold()

        def parse(text: str) -> str:
            new = " ".join(parse_fields(text, ["New Query"])["New Query"].split())
            if not new or (last is not None and key(new) == key(last)):
                raise _NonProgress(f"rewrite made no progress: {new!r}")
            return new

        bindings = {"Question": q, "Last Rewritten Query": last if last is not None else "none"}
        try:
            return self._run("rewrite_query", bindings, parse)
        except FormatError as exc:
            log.info("rewrite_query falling back to the question itself: %s", exc)
            return q

    def rerank(self, query: str, batch: Sequence[Passage]) -> RerankResult:
        if not batch:
            raise PreconditionError("cannot rerank an empty batch")
        check_batch(batch)
        batch_ids = [p.local_id for p in batch]

        def parse(text: str) -> RerankResult:
            try:
                f = parse_fields(text, ["Reasoning", "Output"])
                reasoning, line = f["Reasoning"], f["Output"]
            except MissingField:
                # bare "[2] > [1]" replies are common for this prompt
                reasoning, line = "", text
            ids = [int(x) for x in _BRACKET_ID.findall(line)]
            if not any(i in set(batch_ids) for i in ids):
                raise UnparseableRanking(f"no valid passage id in {line[:120]!r}")
            return RerankResult(reasoning, tuple(repair_ranking(ids, batch_ids)))

        bindings = {
            "Query": query,
            "Identifiers": ", ".join(f"[{i}]" for i in batch_ids),
            "Context": format_passages(self._passages(batch)),
        }
        return self._run("rerank", bindings, parse)

    def answer(self, q: str, passages: Sequence[Passage], background: str = "none") -> tuple[CitedAnswer, str]:
        def parse(text: str) -> tuple[CitedAnswer, str]:
            f = parse_fields(text, ["Reasoning", "Output"])
            if not f["Output"]:
                raise MissingField("Output")
            return extract_citations(f["Output"]), f["Reasoning"]

        bindings = {
            "Question": q,
            "Context": format_passages(self._passages(passages)),
            "Background": background or "none",
        }
        return self._run("answer", bindings, parse)

    def verify(self, q: str, a: CitedAnswer, batch: Sequence[Passage]) -> Verdict:
        """Check a step answer against the passages it cites.

        Abstentions are rejected without a model call, as are answers whose
        every citation points outside ``batch``. Citations to unknown ids are
        pruned; an answer citing nothing is checked against the whole batch.
        """
        if a.is_abstention:
            return Verdict(False, "abstention: the answer says it does not know")
        ids = {p.local_id for p in batch}
        valid = a.citations & ids
        if a.citations and not valid:
            return Verdict(False, f"cited passages {sorted(a.citations)} are not in the retrieved batch")
        cited = [p for p in batch if p.local_id in valid] if valid else list(batch)
        bindings = {"Question": q, "Answer": a.text, "Source": format_passages(self._passages(cited))}
        return self._run("verify", bindings, _parse_verdict)

    def verify_final(self, q: Question, a: CitedAnswer, passages: Sequence[Passage]) -> Verdict:
        if a.is_abstention:
            return Verdict(False, "abstention: no valid answer was determined")
        bindings = {
            "Question": q.text,
            "Answer": a.text,
            "Passages": format_passages(self._passages(passages), renumber=True),
        }
        return self._run("verify_final", bindings, _parse_verdict)

    def finalize(self, q: Question, history: Sequence[QARecord]) -> tuple[CitedAnswer, str]:
        if not history:
            raise PreconditionError("finalize needs at least one answered sub-question")

        def parse(text: str) -> tuple[CitedAnswer, str]:
            f = parse_fields(text, ["Reasoning", "Answer"])
            if not f["Answer"]:
                raise MissingField("Answer")
            return extract_citations(f["Answer"]), f["Reasoning"]

        bindings = {"Question": q.text, "Decomposed Information": format_history(history)}
        return self._run("finalize", bindings, parse)

    def improve_analysis(self, q: Question, record: PipelineTrace | Sequence[Attempt]) -> Analysis:
        attempts = record.attempts if isinstance(record, PipelineTrace) else tuple(record)
        if not attempts:
            raise PreconditionError("improve_analysis needs at least one attempt")
        if attempts[-1].verdict.accepted:
            raise PreconditionError("the last attempt was accepted; nothing to improve")

        def parse(text: str) -> Analysis:
            body = parse_fields(text, ["Analysis"])["Analysis"]
            if not body:
                raise MissingField("Analysis")
            appropriate = APPROPRIATE_SENTINEL.rstrip(".") in " ".join(body.split())
            return Analysis(body, appropriate)

        bindings = {"Question": q.text, "Sub-questions Solving Record": format_solving_record(attempts[-1])}
        return self._run("improve_analysis", bindings, parse)

    def improve_decomposition(
        self, q: Question, prior_plans: Sequence[tuple[DecompositionPlan, str]]
    ) -> DecompositionPlan:
        if not prior_plans:
            raise PreconditionError("improve_decomposition needs at least one prior plan")
        generation = max(p.generation for p, _ in prior_plans) + 1
        seen = {p.signature() for p, _ in prior_plans}

        def parse(text: str) -> DecompositionPlan:
            f = parse_fields(text, ["Reasoning", "New Decomposition"])
            plan = parse_plan(q, f["Reasoning"], f["New Decomposition"], generation)
            if plan.signature() in seen:
                raise _RepeatedPlan(plan)
            return plan

        blocks = []
        for n, (plan, analysis) in enumerate(prior_plans, start=1):
            blocks.append(
                f"Incorrect decomposition {n}:\n{plan.numbered()}\n"
                f"New decomposition instructions {n}:\n{analysis.strip() or 'none'}"
            )
        bindings = {"Question": q.text, "Previous Decompositions": "\n".join(blocks)}
        try:
            return self._run("improve_decomposition", bindings, parse, soft=_RepeatedPlan)
        except _RepeatedPlan as exc:
            p = exc.plan
            return DecompositionPlan(p.original, p.reasoning, p.subs, p.generation, repeat=True)

    def llm_eval(self, q: Question, prediction: str, gold: Sequence[str]) -> bool:
        if not gold:
            raise PreconditionError("llm_eval needs at least one gold answer")

        def parse(text: str) -> bool:
            return parse_bool(parse_fields(text, ["Reasoning", "Output"])["Output"])

        bindings = {
            "Question": q.text,
            "Ground Truth Answer": json.dumps(list(gold), ensure_ascii=False),
            "Our Answer": prediction,
        }
        return self._run("llm_eval", bindings, parse)


def _parse_verdict(text: str) -> Verdict:
    f = parse_fields(text, ["Reason", "Output"])
    accepted = parse_bool(f["Output"])
    reason = f["Reason"] or ("" if accepted else "rejected without a stated reason")
    return Verdict(accepted, reason)
