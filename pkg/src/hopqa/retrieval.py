"""Corpus ingestion, a BM25 retriever and a client for remote retrieval services."""

from __future__ import annotations

import json
import math
import os
import re
import tempfile
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import httpx

from .core import Passage
from .errors import ConfigError, DuplicateDocId, EmptyIndex, MalformedLine, PreconditionError, RetrievalError

K1 = 1.2
B = 0.75
INDEX_FORMAT = "hopqa-bm25/1"

_TOKEN_RE = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class CorpusChunk:
    doc_id: str
    title: str
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"chunk {self.doc_id!r} has empty text")


@dataclass(frozen=True)
class RetrieverConfig:
    kind: str = "local_lexical"
    top_k: int = 10
    index_path: str | None = None
    remote_endpoint: str | None = None
    timeout: float = 30.0
    # total characters of passage text allowed into one prompt; None disables truncation
    passage_char_budget: int | None = 12000

    def __post_init__(self) -> None:
        if self.kind not in ("local_lexical", "remote"):
            raise ConfigError(f"unknown retriever kind {self.kind!r}")
        if self.top_k <= 0:
            raise ConfigError("retrieval top_k must be > 0")
        if (self.kind == "remote") != bool(self.remote_endpoint):
            raise ConfigError("remote_endpoint is required for the remote retriever and only for it")
        if self.passage_char_budget is not None and self.passage_char_budget <= 0:
            raise ConfigError("passage_char_budget must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "top_k": self.top_k,
            "index_path": self.index_path,
            "remote_endpoint": self.remote_endpoint,
            "timeout": self.timeout,
            "passage_char_budget": self.passage_char_budget,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RetrieverConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown retrieval keys: {sorted(unknown)}")
        return cls(**dict(d))


class Retriever(Protocol):
    def retrieve(self, query: str, k: int) -> list[Passage]: ...


def read_corpus(path: str | Path) -> list[CorpusChunk]:
    """Parse a JSONL corpus with one ``{doc_id, title, text}`` object per line."""
    chunks: list[CorpusChunk] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(lineno, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise MalformedLine(lineno, "expected a JSON object")
            for key in ("doc_id", "title", "text"):
                if key not in obj:
                    raise MalformedLine(lineno, f"missing {key!r}")
            doc_id = str(obj["doc_id"])
            if not isinstance(obj["text"], str) or not obj["text"].strip():
                raise MalformedLine(lineno, "'text' must be a non-empty string")
            if doc_id in seen:
                raise DuplicateDocId(doc_id, lineno)
            seen.add(doc_id)
            chunks.append(CorpusChunk(doc_id, str(obj["title"]), obj["text"]))
    return chunks


class LexicalIndex:
    """In-memory BM25 inverted index over corpus chunks."""

    def __init__(self, chunks: Sequence[CorpusChunk], k1: float = K1, b: float = B) -> None:
        self.k1 = k1
        self.b = b
        self.chunks = list(chunks)
        self.doc_len: list[int] = []
        self.postings: dict[str, list[tuple[int, int]]] = {}
        for doc, chunk in enumerate(self.chunks):
            counts = Counter(tokenize(f"{chunk.title} {chunk.text}"))
            self.doc_len.append(sum(counts.values()))
            for term, tf in counts.items():
                self.postings.setdefault(term, []).append((doc, tf))
        self.n_docs = len(self.chunks)
        self.avgdl = sum(self.doc_len) / self.n_docs if self.n_docs else 0.0

    def __len__(self) -> int:
        return self.n_docs

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def scores(self, query: str) -> dict[int, float]:
        """BM25 score of every chunk sharing at least one term with the query.

        Query terms are deduplicated and summed in sorted order, so scores are
        reproducible bit for bit.
        """
        acc: dict[int, float] = {}
        for term in sorted(set(tokenize(query))):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for doc, tf in plist:
                norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[doc] / self.avgdl)
                acc[doc] = acc.get(doc, 0.0) + idf * (tf * (self.k1 + 1.0)) / (tf + norm)
        return acc

    def retrieve(self, query: str, k: int) -> list[Passage]:
        if k < 1:
            raise PreconditionError("k must be >= 1")
        if not self.n_docs:
            raise EmptyIndex("the index holds no chunks")
        scored = self.scores(query)
        ranked = sorted(scored.items(), key=lambda item: (-item[1], self.chunks[item[0]].doc_id))[:k]
        return [
            Passage(rank, self.chunks[doc].doc_id, self.chunks[doc].title, self.chunks[doc].text, score)
            for rank, (doc, score) in enumerate(ranked, start=1)
        ]

    # -- persistence --

    def save(self, path: str | Path) -> None:
        path = Path(path)
        payload = {
            "format": INDEX_FORMAT,
            "k1": self.k1,
            "b": self.b,
            "chunks": [[c.doc_id, c.title, c.text] for c in self.chunks],
            "doc_len": self.doc_len,
            "df": {t: len(p) for t, p in sorted(self.postings.items())},
            "postings": {t: p for t, p in sorted(self.postings.items())},
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> LexicalIndex:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise EmptyIndex(f"no index at {path}") from exc
        if data.get("format") != INDEX_FORMAT:
            raise RetrievalError(f"{path} is not a {INDEX_FORMAT} index")
        idx = cls.__new__(cls)
        idx.k1 = data["k1"]
        idx.b = data["b"]
        idx.chunks = [CorpusChunk(*c) for c in data["chunks"]]
        idx.doc_len = data["doc_len"]
        idx.postings = {t: [tuple(x) for x in p] for t, p in data["postings"].items()}
        idx.n_docs = len(idx.chunks)
        idx.avgdl = sum(idx.doc_len) / idx.n_docs if idx.n_docs else 0.0
        return idx


def ingest(corpus_path: str | Path, index_path: str | Path) -> tuple[LexicalIndex, int]:
    """Build the index for a JSONL corpus and persist it, replacing any previous index."""
    index = LexicalIndex(read_corpus(corpus_path))
    index.save(index_path)
    return index, len(index)


class RemoteRetriever:
    """Client for a retrieval service answering ``POST {query, k}`` with ``{passages: [...]}``."""

    def __init__(self, endpoint: str, timeout: float = 30.0, client: httpx.Client | None = None) -> None:
        self.endpoint = endpoint
        self.timeout = timeout
        self._client = client

    def retrieve(self, query: str, k: int) -> list[Passage]:
        if k < 1:
            raise PreconditionError("k must be >= 1")
        post = self._client.post if self._client is not None else httpx.post
        try:
            resp = post(self.endpoint, json={"query": query, "k": k}, timeout=self.timeout)
        except httpx.HTTPError as exc:
            raise RetrievalError(f"remote retriever unreachable: {exc}") from exc
        if resp.status_code >= 400:
            raise RetrievalError(f"remote retriever returned status {resp.status_code}")
        try:
            items = resp.json()["passages"]
            passages = [
                Passage(i, str(p["doc_id"]), str(p.get("title", "")), str(p["text"]), float(p.get("score", 0.0)))
                for i, p in enumerate(items[:k], start=1)
            ]
        except (ValueError, KeyError, TypeError) as exc:
            raise RetrievalError("malformed remote retriever response") from exc
        return passages


def make_retriever(cfg: RetrieverConfig, index: LexicalIndex | None = None) -> Retriever:
    if cfg.kind == "remote":
        assert cfg.remote_endpoint
        return RemoteRetriever(cfg.remote_endpoint, cfg.timeout)
    if index is not None:
        return index
    if not cfg.index_path:
        raise ConfigError("local_lexical retrieval needs retrieval.index_path")
    return LexicalIndex.load(cfg.index_path)


def fit_passages(passages: Sequence[Passage], budget: int | None) -> list[Passage]:
    """Trim passage texts so their total length fits ``budget`` characters.

    The longest texts are cut first: every text is capped at the largest
    common length that keeps the total within budget.
    """
    if budget is None:
        return list(passages)
    lengths = [len(p.text) for p in passages]
    if sum(lengths) <= budget:
        return list(passages)
    lo, hi = 0, max(lengths)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if sum(min(n, mid) for n in lengths) <= budget:
            lo = mid
        else:
            hi = mid - 1
    cap = lo
    return [
        p if len(p.text) <= cap else Passage(p.local_id, p.doc_id, p.title, p.text[:cap], p.score)
        for p in passages
    ]
