"""Three-phase reflective generation: retrieve-or-not, per-passage relevance,
answer.

One run is sequential (each phase depends on the previous); distinct samples
can run concurrently because the engine holds no mutable state. Every run
returns a full :class:`PipelineTrace` so evaluation and debugging never need
to re-execute the backend.
"""
from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

from collections import Counter

from .backend import BackendError, GenerativeBackend, ProtocolViolationError
from .index import DenseIndex, RetrievalHit, candidate_passages, search
from .kb import KnowledgeBase, Passage, passages_of
from .prompts import PromptSegment, PromptStage, build_prompt as build_prompt_segments
from .samples import QuerySample
from .similarity import TextSimilarityScorer
from .tokens import DECISION_TOKENS, RELEVANCE_TOKENS, ReflectiveToken
from .util import atomic_write_bytes, json_line

logger = logging.getLogger(__name__)


class ConfigurationError(Exception):
    pass


class PipelineError(Exception):
    pass


class RerankerError(Exception):
    pass


class ForcedDecision(str, Enum):
    ALWAYS_RET = "always_ret"
    ALWAYS_NORET = "always_noret"


class SelectionMode(str, Enum):
    REFLECTIVE = "reflective"          # judge every candidate with REL/NOREL
    EXTERNAL_SCORER = "external_scorer"  # top passages by text similarity, no judging
    RANDOM_PER_DOC = "random_per_doc"    # seeded random passages per document


class RerankStrategy(str, Enum):
    BUILTIN = "builtin"    # order by logp(REL) - logp(NOREL) from judgments
    EXTERNAL = "external"  # dedicated reranker service reorders candidates


class OnRerankFailure(str, Enum):
    FAIL = "fail"
    KEEP_ORIGINAL = "keep_original"


@dataclass(frozen=True)
class RerankConfig:
    strategy: RerankStrategy
    top_passages: int  # how many passages survive re-ranking

    def __post_init__(self):
        if self.top_passages < 1:
            raise ConfigurationError("rerank top_passages must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything that varies between runs, ablations included.

    All inference-time ablation variants are reachable through this config
    alone: forced decisions, built-in or external re-ranking, similarity-
    scored or random passage selection.
    """

    top_k_docs: int = 5
    rerank: RerankConfig | None = None
    selection: SelectionMode = SelectionMode.REFLECTIVE
    random_passages_per_doc: int = 2
    external_scorer_top: int = 2
    max_relevant: int | None = None
    force_decision: ForcedDecision | None = None
    seed: int = 0

    def __post_init__(self):
        if self.top_k_docs < 1:
            raise ConfigurationError("top_k_docs must be >= 1")
        if self.max_relevant is not None and self.max_relevant < 1:
            raise ConfigurationError("max_relevant must be >= 1 when set")

    def to_dict(self) -> dict:
        return {
            "top_k_docs": self.top_k_docs,
            "rerank": None
            if self.rerank is None
            else {
                "strategy": self.rerank.strategy.value,
                "top_passages": self.rerank.top_passages,
            },
            "selection": self.selection.value,
            "random_passages_per_doc": self.random_passages_per_doc,
            "external_scorer_top": self.external_scorer_top,
            "max_relevant": self.max_relevant,
            "force_decision": None
            if self.force_decision is None
            else self.force_decision.value,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class RetrievalDecision:
    """Outcome of the single constrained RET/NORET step (argmax of the two)."""

    token: ReflectiveToken
    logp_ret: float
    logp_noret: float


@dataclass(frozen=True)
class RelevanceJudgment:
    passage: Passage
    token: ReflectiveToken
    logp_rel: float
    logp_norel: float

    @property
    def score(self) -> float:
        return self.logp_rel - self.logp_norel


@dataclass(frozen=True)
class PipelineTrace:
    """Full record of one protocol run.

    ``decision`` is the decision the pipeline acted on; when a forced
    override flipped the raw argmax outcome, ``forced`` is True and the
    log-probabilities still come from the executed constrained call.
    """

    sample_id: str
    decision: RetrievalDecision
    forced: bool
    hits: tuple[RetrievalHit, ...]
    candidates: tuple[Passage, ...]
    judgments: tuple[RelevanceJudgment, ...]
    selected: tuple[Passage, ...]
    answer: str
    fallback: bool
    judge_failures: int
    timings: dict[str, float]
    config: dict


class PassageReranker(Protocol):
    def rerank(self, question: str, passages: Sequence[Passage]) -> Sequence[Passage]: ...


class IdentityReranker:
    def rerank(self, question: str, passages: Sequence[Passage]) -> Sequence[Passage]:
        return list(passages)


class RemotePassageReranker:
    """Client for an external re-ranking service (POST /v1/rerank).

    Request ``{"question": str, "passages": [{"doc_id","section_index","text"}]}``;
    response ``{"order": [int, ...]}``, a permutation of input positions.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, max_retries: int = 3):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries

    def rerank(self, question: str, passages: Sequence[Passage]) -> Sequence[Passage]:
        from ._http import post_json

        body = post_json(
            f"{self.endpoint}/v1/rerank",
            {
                "question": question,
                "passages": [
                    {"doc_id": p.doc_id, "section_index": p.section_index, "text": p.text}
                    for p in passages
                ],
            },
            timeout=self.timeout,
            max_retries=self.max_retries,
        )
        order = body["order"]
        return [passages[i] for i in order]


# --------------------------------------------------------------------------
# Protocol steps
# --------------------------------------------------------------------------


def _relevance_logps(candidates: dict[str, float]) -> tuple[float, float]:
    try:
        return (
            candidates[ReflectiveToken.REL.value],
            candidates[ReflectiveToken.NOREL.value],
        )
    except KeyError as exc:
        raise ProtocolViolationError(
            f"relevance step must report logprobs for both relevance tokens: {exc}"
        ) from exc


def decide_retrieval(backend: GenerativeBackend, sample: QuerySample) -> RetrievalDecision:
    """One constrained step over {<RET>, <NORET>}; both logprobs recorded.

    A tie resolves to NORET, matching the conservative tie rule used for
    relevance judgments.
    """
    prompt = build_prompt_segments(PromptStage.DECISION, sample.question, sample.image_ref)
    result = backend.constrained_generate(prompt, allowed=DECISION_TOKENS, max_tokens=1)
    cands = dict(result.candidate_logprobs[0])
    try:
        logp_ret = cands[ReflectiveToken.RET.value]
        logp_noret = cands[ReflectiveToken.NORET.value]
    except KeyError as exc:
        raise ProtocolViolationError(
            f"decision step must report logprobs for both decision tokens: {exc}"
        ) from exc
    token = ReflectiveToken.RET if logp_ret > logp_noret else ReflectiveToken.NORET
    return RetrievalDecision(token=token, logp_ret=logp_ret, logp_noret=logp_noret)


def judge_passage(
    backend: GenerativeBackend, sample: QuerySample, passage: Passage
) -> RelevanceJudgment:
    """One constrained step over {<REL>, <NOREL>} for a single passage.

    The judgment token follows the score sign: REL iff
    logp(REL) - logp(NOREL) > 0, ties to NOREL.
    """
    prompt = build_prompt_segments(
        PromptStage.JUDGMENT, sample.question, sample.image_ref, [passage.text]
    )
    result = backend.constrained_generate(prompt, allowed=RELEVANCE_TOKENS, max_tokens=1)
    logp_rel, logp_norel = _relevance_logps(dict(result.candidate_logprobs[0]))
    token = (
        ReflectiveToken.REL if logp_rel - logp_norel > 0 else ReflectiveToken.NOREL
    )
    return RelevanceJudgment(
        passage=passage, token=token, logp_rel=logp_rel, logp_norel=logp_norel
    )


def rank_by_relevance(
    judgments: Sequence[RelevanceJudgment], top_passages: int
) -> list[Passage]:
    """Passages by descending logp(REL) - logp(NOREL), ignoring the tokens.

    Stable: equal scores keep the original candidate order. Returns the first
    min(top_passages, n).
    """
    if not judgments:
        raise ValueError("judgments must be non-empty")
    if top_passages < 1:
        raise ValueError("top_passages must be >= 1")
    ranked = sorted(
        enumerate(judgments), key=lambda pair: (-pair[1].score, pair[0])
    )
    return [j.passage for _, j in ranked[:top_passages]]


def apply_external_reranker(
    reranker: PassageReranker,
    sample: QuerySample,
    candidates: Sequence[Passage],
    on_failure: OnRerankFailure = OnRerankFailure.FAIL,
) -> list[Passage]:
    """Reorder candidates through an external service.

    The service may only permute: a changed passage multiset is an error.
    Service failures follow ``on_failure`` (fail by default).
    """
    try:
        reordered = list(reranker.rerank(sample.question, candidates))
    except Exception as exc:
        if on_failure is OnRerankFailure.KEEP_ORIGINAL:
            logger.warning("reranker failed (%s); keeping original order", exc)
            return list(candidates)
        raise RerankerError(f"reranker service failed: {exc}") from exc
    if Counter(p.key for p in reordered) != Counter(p.key for p in candidates):
        raise RerankerError("reranker changed passage multiset")
    return reordered


def _cap_relevant(
    selected: list[Passage], judgments: Sequence[RelevanceJudgment], cap: int
) -> list[Passage]:
    # Keep the highest-score passages but preserve candidate order among them.
    scores = {j.passage.key: j.score for j in judgments}
    ranked = sorted(
        enumerate(selected), key=lambda pair: (-scores[pair[1].key], pair[0])
    )
    keep = {pair[1].key for pair in ranked[:cap]}
    return [p for p in selected if p.key in keep]


def _answer(
    backend: GenerativeBackend,
    sample: QuerySample,
    selected: Sequence[Passage] | None,
) -> str:
    if selected is None:
        prompt = build_prompt_segments(
            PromptStage.ANSWER_DIRECT, sample.question, sample.image_ref
        )
    else:
        prompt = build_prompt_segments(
            PromptStage.ANSWER_WITH_PASSAGES,
            sample.question,
            sample.image_ref,
            [p.text for p in selected],
        )
    result = backend.constrained_generate(prompt, allowed=None, max_tokens=None)
    return result.text.strip()


class ReflectiveEngine:
    """Wires a backend, a KB, an index, and optional providers together."""

    def __init__(
        self,
        backend: GenerativeBackend,
        kb: KnowledgeBase | None = None,
        index: DenseIndex | None = None,
        similarity_scorer: TextSimilarityScorer | None = None,
        reranker: PassageReranker | None = None,
        rerank_failure_policy: OnRerankFailure = OnRerankFailure.FAIL,
    ):
        self.backend = backend
        self.kb = kb
        self.index = index
        self.similarity_scorer = similarity_scorer
        self.reranker = reranker
        self.rerank_failure_policy = rerank_failure_policy

    # -- phases ------------------------------------------------------------

    def _retrieve(
        self, sample: QuerySample, config: PipelineConfig
    ) -> tuple[list[RetrievalHit], list[Passage]]:
        if self.index is None or self.kb is None:
            raise ConfigurationError(
                "retrieval decided but no index/knowledge base is configured"
            )
        if sample.image_embedding is None:
            raise ConfigurationError(
                f"sample {sample.id!r} has no image embedding to query with"
            )
        hits = search(self.index, sample.image_embedding, config.top_k_docs)
        candidates = candidate_passages(self.kb, hits, config.top_k_docs)
        return hits, candidates

    def _select(
        self,
        sample: QuerySample,
        config: PipelineConfig,
        candidates: list[Passage],
    ) -> tuple[list[RelevanceJudgment], list[Passage], bool, int]:
        """Returns (judgments, selected, fallback, judge_failures)."""
        if config.selection is SelectionMode.EXTERNAL_SCORER:
            if self.similarity_scorer is None:
                raise ConfigurationError(
                    "external-scorer selection requires a similarity scorer"
                )
            scored = sorted(
                enumerate(candidates),
                key=lambda pair: (
                    -self.similarity_scorer.score(sample.question, pair[1].text),
                    pair[0],
                ),
            )
            selected = [p for _, p in scored[: config.external_scorer_top]]
            return [], selected, False, 0

        if config.selection is SelectionMode.RANDOM_PER_DOC:
            rng = random.Random(f"{config.seed}:{sample.id}:random_passages")
            doc_order = list(dict.fromkeys(p.doc_id for p in candidates))
            selected = []
            for doc_id in doc_order:
                sections = [p for p in candidates if p.doc_id == doc_id]
                take = min(config.random_passages_per_doc, len(sections))
                chosen = rng.sample(sections, take)
                selected.extend(sorted(chosen, key=lambda p: p.section_index))
            return [], selected, False, 0

        judgments: list[RelevanceJudgment] = []
        failures = 0
        for passage in candidates:
            try:
                judgments.append(judge_passage(self.backend, sample, passage))
            except BackendError as exc:
                failures += 1
                logger.warning(
                    "judgment failed for %s (%s); passage skipped",
                    passage.key,
                    exc,
                )
        if not judgments:
            raise PipelineError(
                f"sample {sample.id!r}: every candidate judgment failed"
            )

        if config.rerank is not None and config.rerank.strategy is RerankStrategy.BUILTIN:
            selected = rank_by_relevance(judgments, config.rerank.top_passages)
            return judgments, selected, False, failures

        selected = [j.passage for j in judgments if j.token is ReflectiveToken.REL]
        if config.max_relevant is not None and len(selected) > config.max_relevant:
            selected = _cap_relevant(selected, judgments, config.max_relevant)
        fallback = False
        if not selected:
            # Answering with zero context would silently degrade; use the
            # least-bad passage and flag the trace.
            best = min(
                enumerate(judgments), key=lambda pair: (-pair[1].score, pair[0])
            )[1]
            selected = [best.passage]
            fallback = True
        return judgments, selected, fallback, failures

    def _run(
        self,
        sample: QuerySample,
        config: PipelineConfig,
        oracle_doc_id: str | None = None,
    ) -> PipelineTrace:
        timings: dict[str, float] = {}
        started = time.perf_counter()

        t0 = time.perf_counter()
        decision = decide_retrieval(self.backend, sample)
        timings["decide"] = time.perf_counter() - t0

        if oracle_doc_id is not None:
            effective = ReflectiveToken.RET
        elif config.force_decision is ForcedDecision.ALWAYS_RET:
            effective = ReflectiveToken.RET
        elif config.force_decision is ForcedDecision.ALWAYS_NORET:
            effective = ReflectiveToken.NORET
        else:
            effective = decision.token
        forced = effective is not decision.token
        acted = RetrievalDecision(
            token=effective, logp_ret=decision.logp_ret, logp_noret=decision.logp_noret
        )

        if effective is ReflectiveToken.NORET:
            t0 = time.perf_counter()
            answer = _answer(self.backend, sample, None)
            timings["answer"] = time.perf_counter() - t0
            timings["total"] = time.perf_counter() - started
            return PipelineTrace(
                sample_id=sample.id,
                decision=acted,
                forced=forced,
                hits=(),
                candidates=(),
                judgments=(),
                selected=(),
                answer=answer,
                fallback=False,
                judge_failures=0,
                timings=timings,
                config=config.to_dict(),
            )

        t0 = time.perf_counter()
        if oracle_doc_id is not None:
            if self.kb is None:
                raise ConfigurationError("oracle mode requires a knowledge base")
            hits: list[RetrievalHit] = []
            candidates = passages_of(self.kb, oracle_doc_id)
        else:
            hits, candidates = self._retrieve(sample, config)
        if config.rerank is not None and config.rerank.strategy is RerankStrategy.EXTERNAL:
            if self.reranker is None:
                raise ConfigurationError("external re-ranking requires a reranker")
            candidates = apply_external_reranker(
                self.reranker, sample, candidates, self.rerank_failure_policy
            )[: config.rerank.top_passages]
        timings["retrieve"] = time.perf_counter() - t0
        if not candidates:
            raise PipelineError(
                f"sample {sample.id!r}: retrieval produced no candidate passages"
            )

        t0 = time.perf_counter()
        judgments, selected, fallback, failures = self._select(
            sample, config, candidates
        )
        timings["judge"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        answer = _answer(self.backend, sample, selected)
        timings["answer"] = time.perf_counter() - t0
        timings["total"] = time.perf_counter() - started

        return PipelineTrace(
            sample_id=sample.id,
            decision=acted,
            forced=forced,
            hits=tuple(hits),
            candidates=tuple(candidates),
            judgments=tuple(judgments),
            selected=tuple(selected),
            answer=answer,
            fallback=fallback,
            judge_failures=failures,
            timings=timings,
            config=config.to_dict(),
        )

    def run(self, sample: QuerySample, config: PipelineConfig) -> PipelineTrace:
        return self._run(sample, config)

    def run_oracle(
        self, sample: QuerySample, gold_doc_id: str, config: PipelineConfig
    ) -> PipelineTrace:
        """Skip search: candidates are all passages of the gold document.

        The decision step still executes (its logprobs are recorded) but the
        retrieval branch is always taken; only passage selection and
        answering are exercised.
        """
        if self.kb is None:
            raise ConfigurationError("oracle mode requires a knowledge base")
        self.kb.document(gold_doc_id)  # raises LookupError for unknown ids
        return self._run(sample, config, oracle_doc_id=gold_doc_id)

    def build_prompt(
        self,
        stage: PromptStage,
        sample: QuerySample,
        passages: Sequence[Passage] | None = None,
    ) -> list[PromptSegment]:
        texts = None if passages is None else [p.text for p in passages]
        return build_prompt_segments(stage, sample.question, sample.image_ref, texts)


# --------------------------------------------------------------------------
# Trace serialization (JSONL, one trace per line)
# --------------------------------------------------------------------------


def _passage_ref(p: Passage) -> dict:
    return {"doc_id": p.doc_id, "section_index": p.section_index}


def trace_to_dict(trace: PipelineTrace, include_timings: bool = True) -> dict:
    out = {
        "sample_id": trace.sample_id,
        "decision": {
            "token": trace.decision.token.value,
            "logp_ret": trace.decision.logp_ret,
            "logp_noret": trace.decision.logp_noret,
        },
        "forced": trace.forced,
        "hits": [
            {"doc_id": h.doc_id, "score": h.score, "rank": h.rank} for h in trace.hits
        ],
        "candidates": [_passage_ref(p) for p in trace.candidates],
        "judgments": [
            {
                "doc_id": j.passage.doc_id,
                "section_index": j.passage.section_index,
                "token": j.token.value,
                "logp_rel": j.logp_rel,
                "logp_norel": j.logp_norel,
                "score": j.score,
            }
            for j in trace.judgments
        ],
        "selected": [_passage_ref(p) for p in trace.selected],
        "answer": trace.answer,
        "fallback": trace.fallback,
        "judge_failures": trace.judge_failures,
        "config": trace.config,
    }
    if include_timings:
        out["timings"] = trace.timings
    return out


def write_traces(
    traces: Sequence[PipelineTrace | dict],
    path: str | Path,
    include_timings: bool = True,
) -> Path:
    lines = []
    for t in traces:
        obj = t if isinstance(t, dict) else trace_to_dict(t, include_timings)
        lines.append(json_line(obj))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
    return Path(path)


def read_trace_dicts(path: str | Path) -> list[dict]:
    return [
        json.loads(line)
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
