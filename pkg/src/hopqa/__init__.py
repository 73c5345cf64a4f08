"""Modular multi-hop retrieval-augmented question answering."""

from __future__ import annotations

from .core import (
    ABSTENTION,
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
)
from .evaluation import Judge, JudgmentCache, MetricsRow, aggregate, cover_em, normalize
from .gateway import Gateway, ModelSpec, ScriptedBackend, load_templates, parse_fields, render
from .modules import ReasoningModules
from .orchestrator import Pipeline, PipelineConfig, load_config, load_dataset, run_ablation, run_batch
from .retrieval import LexicalIndex, RetrieverConfig, ingest

__version__ = "0.1.0"

__all__ = [
    "ABSTENTION",
    "Attempt",
    "CitedAnswer",
    "DecompositionPlan",
    "Gateway",
    "Judge",
    "JudgmentCache",
    "LexicalIndex",
    "MetricsRow",
    "ModelSpec",
    "Passage",
    "Pipeline",
    "PipelineConfig",
    "PipelineTrace",
    "QARecord",
    "Question",
    "ReasoningModules",
    "RetrieverConfig",
    "Route",
    "ScriptedBackend",
    "StepTrace",
    "SubQuestion",
    "Verdict",
    "aggregate",
    "cover_em",
    "ingest",
    "load_config",
    "load_dataset",
    "load_templates",
    "normalize",
    "parse_fields",
    "render",
    "run_ablation",
    "run_batch",
]
