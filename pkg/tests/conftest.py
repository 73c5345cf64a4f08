from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

import pytest

from hopqa.core import Question
from hopqa.gateway import Gateway, ModelSpec, ScriptedBackend, load_templates
from hopqa.orchestrator import ModuleFlags, Pipeline, PipelineConfig
from hopqa.retrieval import CorpusChunk, LexicalIndex, RetrieverConfig, read_corpus

FIXTURES = Path(__file__).parent / "fixtures"
IPHONE_Q = "Who is the CEO of the company owns the brand that produces iPhones?"

TEMPLATES = load_templates()


def R(template: str, text: str, contains: str | None = None, times: int | None = 1, pt=None, ct=None) -> dict:
    """One scripted response entry."""
    entry = {"template": template, "text": text, "contains": contains, "times": times}
    if pt is not None:
        entry["prompt_tokens"] = pt
        entry["completion_tokens"] = ct
    return entry


def flags(**kw) -> ModuleFlags:
    return ModuleFlags(**kw)


def config(label: str = "test", **kw) -> PipelineConfig:
    enable = kw.pop("enable", None) or ModuleFlags(**{k: kw.pop(k) for k in list(kw) if k in ModuleFlags.__dataclass_fields__})
    kw.setdefault("retrieval", RetrieverConfig(top_k=3))
    return PipelineConfig(label=label, enable=enable, **kw)


def gateway(entries) -> Gateway:
    return Gateway(scripted=ScriptedBackend(entries, TEMPLATES))


def pipeline(entries, index, cfg: PipelineConfig | None = None) -> Pipeline:
    return Pipeline(cfg or config(), gateway(entries), index, TEMPLATES)


@pytest.fixture(scope="session")
def iphone_index() -> LexicalIndex:
    return LexicalIndex(read_corpus(FIXTURES / "iphone_corpus.jsonl"))


@pytest.fixture
def iphone_question() -> Question:
    return Question(IPHONE_Q, "iphone-ceo", ("Tim Cook",))


# -- a synthetic two-hop world ----------------------------------------------


@dataclass
class Behavior:
    """How the scripted model behaves on one question."""

    simple_ok: bool = True
    # verify_final outcomes per multi-hop attempt, in order; the last one repeats
    finals: tuple[bool, ...] = (True,)
    judge_ok: bool = True


class ChainWorld:
    """Questions of the form "capital of the country where PersonN was born".

    Every response is keyed on prompt content rather than call order, so the
    same script serves any module configuration.
    """

    def __init__(self, n: int, seed: int = 0) -> None:
        rng = random.Random(seed)
        self.n = n
        self.people = [f"Person{i}" for i in range(n)]
        self.countries = [f"Country{i}" for i in range(n)]
        self.cities = [f"City{rng.randrange(10**6)}x{i}" for i in range(n)]
        chunks = []
        for i in range(n):
            chunks.append(CorpusChunk(f"born-{i}", self.people[i], f"{self.people[i]} was born in {self.countries[i]}."))
            chunks.append(
                CorpusChunk(f"cap-{i}", self.countries[i], f"The capital of {self.countries[i]} is {self.cities[i]}.")
            )
        self.index = LexicalIndex(chunks)

    def question(self, i: int) -> Question:
        return Question(self.q_text(i), f"q{i}", (self.cities[i],))

    def questions(self) -> list[Question]:
        return [self.question(i) for i in range(self.n)]

    def q_text(self, i: int) -> str:
        return f"What is the capital of the country where {self.people[i]} was born?"

    def sub1(self, i: int) -> str:
        return f"Where was {self.people[i]} born?"

    def sub2(self, i: int) -> str:
        return f"What is the capital of {self.countries[i]}?"

    def script(self, i: int, b: Behavior) -> list[dict]:
        q, s1, s2 = self.q_text(i), self.sub1(i), self.sub2(i)
        country, city = self.countries[i], self.cities[i]
        plan = f"1. {s1}\n2. What is the capital of #1?"

        def key(text: str) -> str:
            return f"\nQuestion: {text}\n"

        entries = []
        # sub-question entries come first: their prompts also quote the original question
        for text, ans in ((s2, city), (s1, country)):
            entries += [
                R("decide_retrieval", "Analysis: Needs a fact.\nOutput: true", f"\nQuestion: {text}", None),
                R("rerank", "Reasoning: Ranked.\nOutput: [1] > [2] > [3]", f"Query: {text}\n", None),
                R("answer", f"Reasoning: From passage [1].\nOutput: {ans} [1]", key(text), None),
                R("verify", "Reason: Supported.\nOutput: true", key(text), None),
            ]
        simple_answer = city if b.simple_ok else country
        entries += [
            R("answer", f"Reasoning: From passage [1].\nOutput: {simple_answer} [1]", key(q), None),
            R("verify", f"Reason: Checked.\nOutput: {str(b.simple_ok).lower()}", key(q), None),
            R("rewrite_query", f"New Query: {self.people[i]} birthplace capital", key(q), None),
            R("decide_retrieval", "Analysis: Needs a fact.\nOutput: true", f"\nQuestion: {q}", None),
            R("rerank", "Reasoning: Ranked.\nOutput: [1] > [2] > [3]", f"Query: {q}\n", None),
            R("rerank", "Reasoning: Ranked.\nOutput: [2] > [1]", f"Query: {self.people[i]} birthplace capital\n", None),
            R("decompose", f"Reasoning: Two hops.\nOutput:\n{plan}", f"\n\nQuestion: {q}", None),
            R("construct", f"Rewritten Question: {s2}", f"Original Question: {q}\n", None),
            R("finalize", f"Reasoning: Combined.\nAnswer: {city}", key(q), None),
            R("improve_analysis", "Analysis: Split the question by person first, then country.", key(q), None),
            R("improve_decomposition", f"Reasoning: Same structure.\nNew Decomposition:\n{plan}", key(q), None),
            R("llm_eval", f"Reasoning: Compared.\nOutput: {str(b.judge_ok).lower()}", key(q), None),
        ]
        finals = list(b.finals)
        for ok in finals[:-1]:
            entries.append(R("verify_final", f"Reason: Checked.\nOutput: {str(ok).lower()}", key(q), 1))
        entries.append(R("verify_final", f"Reason: Checked.\nOutput: {str(finals[-1]).lower()}", key(q), None))
        return entries

    def full_script(self, behaviors: dict[int, Behavior] | None = None) -> list[dict]:
        behaviors = behaviors or {}
        out = []
        for i in range(self.n):
            out += self.script(i, behaviors.get(i, Behavior()))
        return out


@pytest.fixture
def world() -> ChainWorld:
    return ChainWorld(4)


__all__ = ["FIXTURES", "IPHONE_Q", "R", "TEMPLATES", "Behavior", "ChainWorld", "ModelSpec", "config", "gateway", "pipeline"]
