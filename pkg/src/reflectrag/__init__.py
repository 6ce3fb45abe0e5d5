"""Reflective-token retrieval-augmented generation pipeline."""

from .backend import GenerationResult, MockBackend, RemoteBackend, ScriptedResponse
from .engine import (
    ForcedDecision,
    PipelineConfig,
    PipelineTrace,
    ReflectiveEngine,
    RerankConfig,
    RerankStrategy,
    SelectionMode,
)
from .index import DenseIndex, RetrievalMode, build_index, recall_at_k, search
from .kb import KnowledgeBase, Passage, load_kb, passages_of, save_kb
from .samples import QuerySample, load_samples, save_samples
from .tokens import ReflectiveToken

__version__ = "0.1.0"

__all__ = [
    "DenseIndex",
    "ForcedDecision",
    "GenerationResult",
    "KnowledgeBase",
    "MockBackend",
    "Passage",
    "PipelineConfig",
    "PipelineTrace",
    "QuerySample",
    "ReflectiveEngine",
    "ReflectiveToken",
    "RemoteBackend",
    "RerankConfig",
    "RerankStrategy",
    "RetrievalMode",
    "ScriptedResponse",
    "SelectionMode",
    "build_index",
    "load_kb",
    "load_samples",
    "passages_of",
    "recall_at_k",
    "save_kb",
    "save_samples",
    "search",
    "__version__",
]
