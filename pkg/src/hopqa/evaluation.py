"""Cover-EM, the LLM judge adapter and aggregation into metrics tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import threading
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core import Question
from .errors import EmptyGold, HopQAError, MissingJudgment, PreconditionError, ValidationError
from .modules import ReasoningModules

log = logging.getLogger(__name__)

FLAG_COLUMNS = ("QD", "QC", "QR", "PR", "AV", "RD", "simple_qa")


def normalize(s: str) -> list[str]:
    """Lowercase, delete punctuation characters, split on whitespace.

    Punctuation is deleted, not replaced by a space, so "U.S.A." becomes
    the single token "usa" and hyphenated words fuse.
    """
    lowered = s.lower()
    stripped = "".join(ch for ch in lowered if not unicodedata.category(ch).startswith("P"))
    return stripped.split()


def is_contiguous_subsequence(needle: Sequence[str], haystack: Sequence[str]) -> bool:
    """Knuth-Morris-Pratt search for ``needle`` as a run inside ``haystack``."""
    m = len(needle)
    if m == 0:
        return True
    fail = [0] * m
    k = 0
    for i in range(1, m):
        while k and needle[i] != needle[k]:
            k = fail[k - 1]
        if needle[i] == needle[k]:
            k += 1
        fail[i] = k
    k = 0
    for tok in haystack:
        while k and tok != needle[k]:
            k = fail[k - 1]
        if tok == needle[k]:
            k += 1
            if k == m:
                return True
    return False


def cover_em(prediction: str, gold: Sequence[str]) -> int:
    """1 if some normalized gold answer appears intact inside the normalized prediction."""
    if not gold:
        raise EmptyGold("cover_em needs at least one gold answer")
    gold_tokens = [normalize(g) for g in gold]
    for g, toks in zip(gold, gold_tokens):
        if not toks:
            raise EmptyGold(f"gold answer {g!r} is empty after normalization")
    pred = normalize(prediction)
    return int(any(is_contiguous_subsequence(toks, pred) for toks in gold_tokens))


# -- judgments --------------------------------------------------------------


def prediction_hash(prediction: str) -> str:
    return hashlib.sha256(prediction.encode("utf-8")).hexdigest()


class JudgmentCache:
    """JSONL sidecar of LLM-judge verdicts keyed by (question id, prediction hash)."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._data: dict[tuple[str, str], bool] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    row = json.loads(line)
                    self._data[(row["question_id"], row["prediction_hash"])] = bool(row["llm_eval"])

    def __len__(self) -> int:
        return len(self._data)

    def get(self, question_id: str, prediction: str) -> bool | None:
        with self._lock:
            return self._data.get((question_id, prediction_hash(prediction)))

    def put(self, question_id: str, prediction: str, verdict: bool) -> None:
        key = (question_id, prediction_hash(prediction))
        with self._lock:
            if key in self._data:
                return
            self._data[key] = verdict
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    row = {"question_id": key[0], "prediction_hash": key[1], "llm_eval": verdict}
                    fh.write(json.dumps(row, sort_keys=True) + "\n")


class Judge:
    """LLM-Eval adapter with a persistent cache; ``calls`` counts fresh judge requests."""

    def __init__(self, modules: ReasoningModules, cache: JudgmentCache | None = None) -> None:
        self.modules = modules
        self.cache = cache if cache is not None else JudgmentCache()
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, question: Question, prediction: str) -> bool:
        if not question.gold_answers:
            raise PreconditionError(f"question {question.id!r} has no gold answers to judge against")
        cached = self.cache.get(question.id, prediction)
        if cached is not None:
            return cached
        with self._lock:
            self.calls += 1
        verdict = self.modules.llm_eval(question, prediction, question.gold_answers)
        self.cache.put(question.id, prediction, verdict)
        return verdict


# -- aggregation ------------------------------------------------------------


@dataclass(frozen=True)
class QuestionResult:
    """Per-question outcome fed to ``aggregate``; judgments may be missing."""

    question_id: str
    prediction: str
    cover_em: int | None
    llm_eval: bool | None
    token_usage: int = 0
    wall_time: float = 0.0
    error: str | None = None


@dataclass(frozen=True)
class MetricsRow:
    config_label: str
    cover_em: float
    llm_eval: float
    avg: float
    avg_tokens: float
    n: int
    avg_wall_time: float = 0.0
    flags: Mapping[str, bool] = field(default_factory=dict)
    upgrades: str = ""
    delta_cover_em: float | None = None
    delta_llm_eval: float | None = None
    delta_avg: float | None = None

    def __post_init__(self) -> None:
        if self.n <= 0:
            raise ValidationError("a metrics row needs n > 0")
        for name in ("cover_em", "llm_eval"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if abs(self.avg - (self.cover_em + self.llm_eval) / 2) > 1e-12:
            raise ValidationError("avg must be the mean of cover_em and llm_eval")

    def with_baseline(self, base: MetricsRow) -> MetricsRow:
        return MetricsRow(
            self.config_label,
            self.cover_em,
            self.llm_eval,
            self.avg,
            self.avg_tokens,
            self.n,
            self.avg_wall_time,
            self.flags,
            self.upgrades,
            self.cover_em - base.cover_em,
            self.llm_eval - base.llm_eval,
            self.avg - base.avg,
        )


def aggregate(
    results: Iterable[QuestionResult],
    config_label: str,
    flags: Mapping[str, bool] | None = None,
    upgrades: str = "",
) -> MetricsRow:
    results = list(results)
    if not results:
        raise PreconditionError("cannot aggregate an empty result set")
    for r in results:
        if r.cover_em is None or r.llm_eval is None:
            raise MissingJudgment(r.question_id)
    n = len(results)
    cem = sum(int(r.cover_em) for r in results) / n  # type: ignore[arg-type]
    llm = sum(int(bool(r.llm_eval)) for r in results) / n
    return MetricsRow(
        config_label=config_label,
        cover_em=cem,
        llm_eval=llm,
        avg=(cem + llm) / 2,
        avg_tokens=sum(r.token_usage for r in results) / n,
        n=n,
        avg_wall_time=sum(r.wall_time for r in results) / n,
        flags=dict(flags or {}),
        upgrades=upgrades,
    )


CSV_COLUMNS = (
    "config",
    *FLAG_COLUMNS,
    "upgrades",
    "cover_em",
    "llm_eval",
    "avg",
    "avg_tokens",
    "avg_wall_time",
    "n",
    "delta_cover_em",
    "delta_llm_eval",
    "delta_avg",
)


def _fmt(x: float | None, digits: int = 3) -> str:
    return "" if x is None else f"{x:.{digits}f}"


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(
            [
                r.config_label,
                *(int(bool(r.flags.get(f, False))) for f in FLAG_COLUMNS),
                r.upgrades,
                _fmt(r.cover_em),
                _fmt(r.llm_eval),
                _fmt(r.avg),
                _fmt(r.avg_tokens, 1),
                _fmt(r.avg_wall_time, 3),
                r.n,
                _fmt(r.delta_cover_em),
                _fmt(r.delta_llm_eval),
                _fmt(r.delta_avg),
            ]
        )
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))


def format_table(rows: Sequence[Mapping[str, object]] | Sequence[MetricsRow]) -> str:
    """Fixed-width text rendering: module flags, then Cover-EM and LLM Eval columns."""
    recs = [dict(zip(CSV_COLUMNS, _row_cells(r))) if isinstance(r, MetricsRow) else dict(r) for r in rows]
    headers = ["config", "QD", "QC", "QR", "PR", "AV", "RD", "SQA", "Cover-EM", "LLM Eval", "Avg", "Tokens", "dAvg"]
    keys = ["config", *FLAG_COLUMNS, "cover_em", "llm_eval", "avg", "avg_tokens", "delta_avg"]
    table = []
    for rec in recs:
        cells = []
        for k in keys:
            v = str(rec.get(k, ""))
            if k in FLAG_COLUMNS:
                v = "x" if v == "1" else "-"
            cells.append(v)
        table.append(cells)
    widths = [max(len(h), *(len(row[i]) for row in table)) if table else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in table:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def _row_cells(r: MetricsRow) -> list[str]:
    return next(csv.reader(io.StringIO(metrics_csv([r]).splitlines()[1])))


def safe_judge(judge: Judge, question: Question, prediction: str) -> tuple[bool, str | None]:
    """Judge one prediction; a failing judge scores 0 and reports why instead of raising."""
    try:
        return judge(question, prediction), None
    except HopQAError as exc:
        log.warning("judge failed on %s: %s", question.id, exc)
        return False, f"judge error: {exc}"
