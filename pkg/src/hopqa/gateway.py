"""Model backends, prompt templates and the labeled-field output grammar."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import httpx

from .errors import (
    BackendRejected,
    BackendTimeout,
    ConfigError,
    DuplicateField,
    MissingBinding,
    MissingField,
    PreconditionError,
    ScriptExhausted,
    ValidationError,
)

log = logging.getLogger(__name__)

BACKENDS = ("scripted", "http")


@dataclass(frozen=True)
class ModelSpec:
    backend: str = "scripted"
    model_name: str = "scripted"
    temperature: float = 0.0
    max_output_tokens: int = 1024
    endpoint: str | None = None
    timeout: float = 60.0
    api_key_env: str | None = None  # name of the env var holding the key, never the key itself

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ConfigError("max_output_tokens must be > 0")
        if (self.backend == "http") != bool(self.endpoint):
            raise ConfigError("endpoint is required for the http backend and only for it")

    @property
    def is_live(self) -> bool:
        return self.backend == "http"

    def to_dict(self) -> dict[str, Any]:
        return {
            "backend": self.backend,
            "model_name": self.model_name,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "endpoint": self.endpoint,
            "timeout": self.timeout,
            "api_key_env": self.api_key_env,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ModelSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**dict(d))


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int
    completion_tokens: int
    approximate: bool = False

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValidationError("token counts must be >= 0")


def approx_tokens(text: str) -> int:
    return len(text.split())


# -- templates --------------------------------------------------------------

_FIELD_LINE = re.compile(r"^([^:{}\n]+): \{.*\}\s*$")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system_text: str
    input_fields: tuple[str, ...]
    output_fields: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_fields", tuple(self.input_fields))
        object.__setattr__(self, "output_fields", tuple(self.output_fields))
        if not self.output_fields:
            raise ValidationError(f"template {self.name!r} declares no output fields")
        labels = self.input_fields + self.output_fields
        if len(set(self.input_fields)) != len(self.input_fields) or len(set(self.output_fields)) != len(
            self.output_fields
        ):
            raise ValidationError(f"template {self.name!r} has duplicate labels: {labels}")


def template_from_text(name: str, text: str, examples: str | None = None) -> PromptTemplate:
    """Build a template from a prompt file, reading field labels from its field listing."""
    text = text.strip("\n")
    head, sep, tail = text.partition("\nInput fields are:\n")
    if not sep:
        raise ValidationError(f"template {name!r} has no 'Input fields are:' section")
    inputs_part, sep, outputs_part = tail.partition("\nOutput fields are:\n")
    if not sep:
        raise ValidationError(f"template {name!r} has no 'Output fields are:' section")

    def labels(block: str) -> list[str]:
        out = []
        for line in block.splitlines():
            m = _FIELD_LINE.match(line)
            if m:
                out.append(m.group(1).strip())
        return out

    system_text = text if examples is None else f"{text}\n\n{examples.strip(chr(10))}"
    return PromptTemplate(name, system_text, tuple(labels(inputs_part)), tuple(labels(outputs_part)))


TEMPLATE_NAMES = (
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


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Load every prompt template, from ``directory`` or from the packaged copies."""
    if directory is None:
        root: Any = resources.files("hopqa").joinpath("templates")
    else:
        root = Path(directory)

    def read(name: str) -> str:
        return root.joinpath(f"{name}.txt").read_text(encoding="utf-8")

    out = {}
    for name in TEMPLATE_NAMES:
        examples = read("decompose_examples") if name == "decompose" else None
        out[name] = template_from_text(name, read(name), examples)
    return out


def templates_digest(templates: Mapping[str, PromptTemplate]) -> str:
    h = hashlib.sha256()
    for name in sorted(templates):
        h.update(name.encode())
        h.update(b"\0")
        h.update(templates[name].system_text.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()


def render(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    for label in template.input_fields:
        if label not in bindings:
            raise MissingBinding(label)
    if not template.input_fields:
        return template.system_text
    lines = "\n".join(f"{label}: {bindings[label]}" for label in template.input_fields)
    return f"{template.system_text}\n\n{lines}"


def parse_fields(text: str, expected: Sequence[str]) -> dict[str, str]:
    """Split labeled model output into fields.

    A field starts at a line beginning with ``Label:`` (optionally wrapped in
    markdown bold) and runs until the next expected label or the end of the
    text. When only the final expected label is missing, unlabeled text that
    precedes every recognized label (or the whole text, if there is no label
    at all) is taken as its value.
    """
    expected = list(expected)
    if not expected:
        raise PreconditionError("parse_fields needs at least one expected label")
    alternatives = "|".join(re.escape(lbl) for lbl in sorted(expected, key=len, reverse=True))
    label_re = re.compile(rf"^[ \t]*(?:\*\*)?({alternatives})(?:\*\*)?[ \t]*:(?:\*\*)?[ \t]*", re.M)

    matches = list(label_re.finditer(text))
    fields: dict[str, str] = {}
    for i, m in enumerate(matches):
        label = m.group(1)
        if label in fields:
            raise DuplicateField(label)
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        fields[label] = text[m.end() : end].strip()

    missing = [lbl for lbl in expected if lbl not in fields]
    if len(missing) == 1 and missing[0] == expected[-1]:
        loose = (text[: matches[0].start()] if matches else text).strip()
        if loose:
            fields[missing[0]] = loose
            missing = []
    if missing:
        raise MissingField(missing[0])
    return {lbl: fields[lbl] for lbl in expected}


# -- backends ---------------------------------------------------------------


@dataclass
class ScriptEntry:
    """One queued scripted response.

    ``template`` and ``contains`` form the prompt fingerprint: the entry only
    answers prompts rendered from that template and containing that text.
    ``times=None`` makes the entry reusable without limit.
    """

    text: str
    template: str | None = None
    contains: str | None = None
    times: int | None = 1
    prompt_tokens: int | None = None
    completion_tokens: int | None = None

    @classmethod
    def from_obj(cls, obj: str | Mapping[str, Any]) -> ScriptEntry:
        if isinstance(obj, str):
            return cls(obj)
        return cls(**dict(obj))


class ScriptedBackend:
    """Deterministic stand-in model that replays queued responses."""

    def __init__(
        self,
        entries: Iterable[str | Mapping[str, Any] | ScriptEntry] = (),
        templates: Mapping[str, PromptTemplate] | None = None,
    ) -> None:
        self._entries = [e if isinstance(e, ScriptEntry) else ScriptEntry.from_obj(e) for e in entries]
        self._templates = templates
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, templates: Mapping[str, PromptTemplate] | None = None) -> ScriptedBackend:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, dict):
            data = data.get("responses", [])
        if not isinstance(data, list):
            raise ConfigError(f"script {path} must be a JSON list of responses")
        return cls(data, templates)

    def extend(self, entries: Iterable[str | Mapping[str, Any] | ScriptEntry]) -> None:
        with self._lock:
            self._entries.extend(e if isinstance(e, ScriptEntry) else ScriptEntry.from_obj(e) for e in entries)

    @property
    def remaining(self) -> int:
        with self._lock:
            return sum(1 for e in self._entries if e.times is None or e.times > 0)

    def _matches(self, entry: ScriptEntry, prompt: str) -> bool:
        if entry.times is not None and entry.times <= 0:
            return False
        if entry.template is not None:
            if self._templates is None:
                self._templates = load_templates()
            tpl = self._templates.get(entry.template)
            if tpl is None:
                raise ConfigError(f"script entry names unknown template {entry.template!r}")
            if not prompt.startswith(tpl.system_text):
                return False
        return entry.contains is None or entry.contains in prompt

    def complete(self, spec: ModelSpec, prompt: str) -> Completion:
        with self._lock:
            for entry in self._entries:
                if self._matches(entry, prompt):
                    if entry.times is not None:
                        entry.times -= 1
                    break
            else:
                raise ScriptExhausted(f"no scripted response left for prompt starting {prompt[:80]!r}")
        if entry.prompt_tokens is not None and entry.completion_tokens is not None:
            return Completion(entry.text, entry.prompt_tokens, entry.completion_tokens)
        return Completion(entry.text, approx_tokens(prompt), approx_tokens(entry.text), approximate=True)


class HttpBackend:
    """Chat-completion client for any endpoint speaking the common JSON protocol."""

    def __init__(self, client: httpx.Client | None = None) -> None:
        self._client = client

    def complete(self, spec: ModelSpec, prompt: str) -> Completion:
        assert spec.endpoint
        headers = {"Content-Type": "application/json"}
        if spec.api_key_env:
            key = os.environ.get(spec.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": spec.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": spec.temperature,
            "max_tokens": spec.max_output_tokens,
        }
        try:
            if self._client is not None:
                resp = self._client.post(spec.endpoint, json=payload, headers=headers, timeout=spec.timeout)
            else:
                resp = httpx.post(spec.endpoint, json=payload, headers=headers, timeout=spec.timeout)
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise BackendTimeout(f"{spec.endpoint}: {exc.__class__.__name__}: {exc}") from exc
        if resp.status_code >= 400:
            raise BackendRejected(resp.status_code, resp.text[:200])
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendRejected(resp.status_code, "malformed chat-completion response") from exc
        usage = body.get("usage") or {}
        pt, ct = usage.get("prompt_tokens"), usage.get("completion_tokens")
        if isinstance(pt, int) and isinstance(ct, int):
            return Completion(text, pt, ct)
        return Completion(text, approx_tokens(prompt), approx_tokens(text), approximate=True)


@dataclass
class Gateway:
    """Routes completions to the backend a ModelSpec names."""

    scripted: ScriptedBackend | None = None
    http: HttpBackend = field(default_factory=HttpBackend)

    def complete(self, spec: ModelSpec, prompt: str) -> Completion:
        if not prompt.strip():
            raise PreconditionError("prompt is empty")
        if spec.backend == "scripted":
            if self.scripted is None:
                raise ScriptExhausted("no script loaded for the scripted backend")
            return self.scripted.complete(spec, prompt)
        return self.http.complete(spec, prompt)


def complete(spec: ModelSpec, prompt: str, gateway: Gateway | None = None) -> Completion:
    return (gateway or Gateway()).complete(spec, prompt)
