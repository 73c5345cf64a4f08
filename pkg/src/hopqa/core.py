"""Domain types shared by the pipelines, plus their canonical JSON form."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Any, Iterable, Mapping, Sequence

from .errors import ForwardReference, MissingAntecedent, ValidationError

ABSTENTION = "I don't know."
TRACE_SCHEMA_VERSION = "1"

# `#10` is placeholder 10, never `#1` followed by "0".
PLACEHOLDER_RE = re.compile(r"#(\d+)")
# Only `[n]` with a bare non-negative integer counts; `[[1]]`, `[1a]`, `[ 1 ]` do not.
CITATION_RE = re.compile(r"(?<!\[)\[(\d+)\](?!\])")


def placeholders(text: str) -> list[int]:
    """Placeholder numbers in order of appearance."""
    return [int(m.group(1)) for m in PLACEHOLDER_RE.finditer(text)]


def is_abstention_text(text: str) -> bool:
    return text.strip() == ABSTENTION


@dataclass(frozen=True)
class Question:
    text: str
    id: str
    gold_answers: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValidationError("question text is empty")
        if self.gold_answers is not None:
            object.__setattr__(self, "gold_answers", tuple(self.gold_answers))
            if not self.gold_answers:
                raise ValidationError(f"question {self.id!r} has an empty gold answer list")

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "id": self.id,
            "gold_answers": list(self.gold_answers) if self.gold_answers is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Question:
        gold = d.get("gold_answers")
        return cls(text=d["text"], id=d["id"], gold_answers=tuple(gold) if gold is not None else None)


@dataclass(frozen=True)
class SubQuestion:
    index: int
    template_text: str
    resolved_text: str | None = None

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValidationError(f"sub-question index must be >= 1, got {self.index}")
        for k in placeholders(self.template_text):
            if not 1 <= k < self.index:
                raise ForwardReference(k, self.index)
        if self.resolved_text is not None and PLACEHOLDER_RE.search(self.resolved_text):
            raise ValidationError(f"resolved text still contains a placeholder: {self.resolved_text!r}")

    @property
    def text(self) -> str:
        return self.resolved_text if self.resolved_text is not None else self.template_text

    def resolved(self, text: str) -> SubQuestion:
        return SubQuestion(self.index, self.template_text, text)

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "template_text": self.template_text, "resolved_text": self.resolved_text}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SubQuestion:
        return cls(d["index"], d["template_text"], d.get("resolved_text"))


@dataclass(frozen=True)
class DecompositionPlan:
    original: Question
    reasoning: str
    subs: tuple[SubQuestion, ...]
    generation: int = 0
    # set when a re-decomposition came back textually identical to an earlier plan
    repeat: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "subs", tuple(self.subs))
        if self.generation < 0:
            raise ValidationError("plan generation must be >= 0")
        for pos, sub in enumerate(self.subs, start=1):
            if sub.index != pos:
                raise ValidationError(f"sub-question indices must be contiguous from 1; got {sub.index} at {pos}")

    @property
    def is_simple(self) -> bool:
        return not self.subs

    def signature(self) -> tuple[str, ...]:
        """Whitespace-normalized sub-question templates, for textual comparison of plans."""
        return tuple(" ".join(s.template_text.split()) for s in self.subs)

    def numbered(self) -> str:
        return "\n".join(f"{s.index}. {s.template_text}" for s in self.subs) or "None"

    def to_dict(self) -> dict[str, Any]:
        return {
            "original": self.original.to_dict(),
            "reasoning": self.reasoning,
            "subs": [s.to_dict() for s in self.subs],
            "generation": self.generation,
            "repeat": self.repeat,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DecompositionPlan:
        return cls(
            original=Question.from_dict(d["original"]),
            reasoning=d["reasoning"],
            subs=tuple(SubQuestion.from_dict(s) for s in d["subs"]),
            generation=d.get("generation", 0),
            repeat=d.get("repeat", False),
        )


@dataclass(frozen=True)
class CitedAnswer:
    text: str
    citations: frozenset[int] = frozenset()
    is_abstention: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "citations", frozenset(self.citations))
        if self.is_abstention != is_abstention_text(self.text):
            raise ValidationError("is_abstention must agree with the abstention sentinel")
        if self.is_abstention and self.citations:
            raise ValidationError("an abstention cannot carry citations")
        if any(c < 0 for c in self.citations):
            raise ValidationError("citation ids must be non-negative")

    @classmethod
    def abstention(cls) -> CitedAnswer:
        return cls(ABSTENTION, frozenset(), True)

    @property
    def uncited(self) -> bool:
        return not self.is_abstention and not self.citations

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "citations": sorted(self.citations), "is_abstention": self.is_abstention}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CitedAnswer:
        return cls(d["text"], frozenset(d["citations"]), d["is_abstention"])


@dataclass(frozen=True)
class QARecord:
    sub_question: SubQuestion
    reasoning: str
    answer: CitedAnswer

    def __post_init__(self) -> None:
        if self.sub_question.resolved_text is None:
            raise ValidationError("a QA record needs a resolved sub-question")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sub_question": self.sub_question.to_dict(),
            "reasoning": self.reasoning,
            "answer": self.answer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> QARecord:
        return cls(SubQuestion.from_dict(d["sub_question"]), d["reasoning"], CitedAnswer.from_dict(d["answer"]))


@dataclass(frozen=True)
class Passage:
    local_id: int
    doc_id: str
    title: str
    text: str
    score: float = 0.0

    def __post_init__(self) -> None:
        if self.local_id < 1:
            raise ValidationError(f"passage local_id must be >= 1, got {self.local_id}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "local_id": self.local_id,
            "doc_id": self.doc_id,
            "title": self.title,
            "text": self.text,
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Passage:
        return cls(d["local_id"], d["doc_id"], d["title"], d["text"], float(d["score"]))


def check_batch(batch: Sequence[Passage]) -> None:
    ids = [p.local_id for p in batch]
    if ids != list(range(1, len(ids) + 1)):
        raise ValidationError(f"passage local_ids must be contiguous from 1, got {ids}")


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str = ""

    def __post_init__(self) -> None:
        if not self.accepted and not self.reason.strip():
            raise ValidationError("a rejected verdict needs a reason")

    def to_dict(self) -> dict[str, Any]:
        return {"accepted": self.accepted, "reason": self.reason}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Verdict:
        return cls(d["accepted"], d["reason"])


@dataclass(frozen=True)
class CallRecord:
    """One completion as seen by the token accounting."""

    module: str
    model_name: str
    prompt_tokens: int
    completion_tokens: int
    approximate: bool = False

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def to_dict(self) -> dict[str, Any]:
        return {
            "module": self.module,
            "model_name": self.model_name,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "approximate": self.approximate,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CallRecord:
        return cls(d["module"], d["model_name"], d["prompt_tokens"], d["completion_tokens"], d["approximate"])


@dataclass(frozen=True)
class StepTrace:
    step_index: int
    constructed_query: str
    retrieval_needed: bool
    rewrites: tuple[str, ...]
    retrieved: tuple[Passage, ...]
    reranked_order: tuple[int, ...]
    record: QARecord
    step_verdict: Verdict
    retries_used: int = 0
    construct_fallback: bool = False
    rejected_answers: tuple[CitedAnswer, ...] = ()
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("rewrites", "retrieved", "reranked_order", "rejected_answers", "notes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.retries_used < 0:
            raise ValidationError("retries_used must be >= 0")
        ids = {p.local_id for p in self.retrieved}
        if len(set(self.reranked_order)) != len(self.reranked_order) or not set(self.reranked_order) <= ids:
            raise ValidationError("reranked_order must be a duplicate-free subset of retrieved ids")

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_index": self.step_index,
            "constructed_query": self.constructed_query,
            "retrieval_needed": self.retrieval_needed,
            "rewrites": list(self.rewrites),
            "retrieved": [p.to_dict() for p in self.retrieved],
            "reranked_order": list(self.reranked_order),
            "record": self.record.to_dict(),
            "step_verdict": self.step_verdict.to_dict(),
            "retries_used": self.retries_used,
            "construct_fallback": self.construct_fallback,
            "rejected_answers": [a.to_dict() for a in self.rejected_answers],
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> StepTrace:
        return cls(
            step_index=d["step_index"],
            constructed_query=d["constructed_query"],
            retrieval_needed=d["retrieval_needed"],
            rewrites=tuple(d["rewrites"]),
            retrieved=tuple(Passage.from_dict(p) for p in d["retrieved"]),
            reranked_order=tuple(d["reranked_order"]),
            record=QARecord.from_dict(d["record"]),
            step_verdict=Verdict.from_dict(d["step_verdict"]),
            retries_used=d["retries_used"],
            construct_fallback=d.get("construct_fallback", False),
            rejected_answers=tuple(CitedAnswer.from_dict(a) for a in d.get("rejected_answers", [])),
            notes=tuple(d.get("notes", [])),
        )


@dataclass(frozen=True)
class Attempt:
    """One pass of a pipeline: the plan it ran, its steps, and the final verdict.

    ``token_usage`` is cumulative over the whole solve at the moment the
    attempt finished, so it never decreases from one attempt to the next.
    ``analysis`` holds the reflection guidance produced after this attempt
    was rejected, if any.
    """

    plan: DecompositionPlan
    steps: tuple[StepTrace, ...]
    final: CitedAnswer
    verdict: Verdict
    final_reasoning: str = ""
    analysis: str | None = None
    token_usage: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))

    def to_dict(self) -> dict[str, Any]:
        return {
            "plan": self.plan.to_dict(),
            "steps": [s.to_dict() for s in self.steps],
            "final": self.final.to_dict(),
            "verdict": self.verdict.to_dict(),
            "final_reasoning": self.final_reasoning,
            "analysis": self.analysis,
            "token_usage": self.token_usage,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Attempt:
        return cls(
            plan=DecompositionPlan.from_dict(d["plan"]),
            steps=tuple(StepTrace.from_dict(s) for s in d["steps"]),
            final=CitedAnswer.from_dict(d["final"]),
            verdict=Verdict.from_dict(d["verdict"]),
            final_reasoning=d.get("final_reasoning", ""),
            analysis=d.get("analysis"),
            token_usage=d.get("token_usage", 0),
        )


class Route(str, Enum):
    SIMPLE = "simple"
    MULTIHOP = "multihop"
    SIMPLE_ESCALATED = "simple_escalated"


@dataclass(frozen=True)
class PipelineTrace:
    question: Question
    attempts: tuple[Attempt, ...]
    route: Route
    token_usage: int
    wall_time: float
    simple_attempt: Attempt | None = None
    verified: bool = False
    calls: tuple[CallRecord, ...] = ()
    models: Mapping[str, str] = field(default_factory=dict)
    approximate_tokens: bool = False
    error: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "attempts", tuple(self.attempts))
        object.__setattr__(self, "calls", tuple(self.calls))
        object.__setattr__(self, "route", Route(self.route))
        object.__setattr__(self, "models", dict(self.models))
        running = 0
        for a in self.attempts:
            if a.token_usage < running:
                raise ValidationError("attempt token usage must be non-decreasing")
            running = a.token_usage

    @property
    def final_attempt(self) -> Attempt | None:
        if self.attempts:
            return self.attempts[-1]
        return self.simple_attempt

    @property
    def final_answer(self) -> CitedAnswer:
        last = self.final_attempt
        if self.error is not None or last is None:
            return CitedAnswer.abstention()
        return last.final

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "question": self.question.to_dict(),
            "attempts": [a.to_dict() for a in self.attempts],
            "route": self.route.value,
            "token_usage": self.token_usage,
            "wall_time": self.wall_time,
            "simple_attempt": self.simple_attempt.to_dict() if self.simple_attempt else None,
            "verified": self.verified,
            "final_answer": self.final_answer.to_dict(),
            "calls": [c.to_dict() for c in self.calls],
            "models": dict(self.models),
            "approximate_tokens": self.approximate_tokens,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PipelineTrace:
        simple = d.get("simple_attempt")
        return cls(
            question=Question.from_dict(d["question"]),
            attempts=tuple(Attempt.from_dict(a) for a in d["attempts"]),
            route=Route(d["route"]),
            token_usage=d["token_usage"],
            wall_time=d["wall_time"],
            simple_attempt=Attempt.from_dict(simple) if simple else None,
            verified=d["verified"],
            calls=tuple(CallRecord.from_dict(c) for c in d.get("calls", [])),
            models=d.get("models", {}),
            approximate_tokens=d.get("approximate_tokens", False),
            error=d.get("error"),
        )

    def to_json(self) -> str:
        return dumps_canonical(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> PipelineTrace:
        return cls.from_dict(json.loads(text))


def dumps_canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


@lru_cache(maxsize=1)
def trace_schema() -> dict[str, Any]:
    text = resources.files("hopqa").joinpath("schema/trace.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_trace_dict(data: Mapping[str, Any]) -> None:
    """Raise ``jsonschema.ValidationError`` if ``data`` does not match the frozen trace schema."""
    import jsonschema

    jsonschema.validate(data, trace_schema())


# -- operations -------------------------------------------------------------


def substitute_placeholders(sub: SubQuestion, history: Sequence[QARecord]) -> str:
    """Replace every ``#k`` in the sub-question template with answer ``k`` verbatim.

    ``history`` is the ordered list of earlier step records; entry ``k`` is
    ``history[k - 1]``.
    """
    by_index = {rec.sub_question.index: rec for rec in history}

    def repl(m: re.Match[str]) -> str:
        k = int(m.group(1))
        if k >= sub.index:
            raise ForwardReference(k, sub.index)
        rec = by_index.get(k)
        if rec is None:
            raise MissingAntecedent(k)
        return rec.answer.text.strip()

    return PLACEHOLDER_RE.sub(repl, sub.template_text)


def extract_citations(raw_answer: str) -> CitedAnswer:
    if is_abstention_text(raw_answer):
        return CitedAnswer(raw_answer, frozenset(), True)
    cites = frozenset(int(m.group(1)) for m in CITATION_RE.finditer(raw_answer))
    return CitedAnswer(raw_answer, cites, False)


def format_history(records: Iterable[QARecord]) -> str:
    """Labeled ``Question #k`` / ``Answer #k`` / ``Reasoning #k`` blocks in step order."""
    blocks = []
    for rec in records:
        k = rec.sub_question.index
        blocks.append(
            f"Question #{k}: {rec.sub_question.text}\n"
            f"Answer #{k}: {rec.answer.text.strip()}\n"
            f"Reasoning #{k}: {rec.reasoning.strip()}"
        )
    return "\n\n".join(blocks)
