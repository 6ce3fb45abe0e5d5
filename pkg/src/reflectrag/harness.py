"""Batch evaluation: scoring, split aggregation, token accuracy, ablations.

Scoring operates on serialized trace dicts, never on live pipeline objects,
so re-scoring a trace file is exactly the same code path as scoring a fresh
run and is guaranteed pure. Report assembly is a deterministic fold ordered
by sample id.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

from ._http import post_json
from .engine import (
    ForcedDecision,
    PipelineConfig,
    ReflectiveEngine,
    SelectionMode,
    trace_to_dict,
)
from .metrics import (
    MetricScore,
    infoseek_aggregate,
    relaxed_accuracy,
    token_f1_em,
    vqa_accuracy,
)
from .samples import QuerySample
from .tokens import ReflectiveToken
from .util import atomic_write_text

logger = logging.getLogger(__name__)

SCORED_METRICS = ("vqa_accuracy", "relaxed_accuracy", "token_f1", "exact_match")

#: Subset tags that trigger harmonic "All" aggregation when they are the only
#: subsets present.
HARMONIC_SUBSETS = frozenset({"unseen_q", "unseen_e"})


class AblationName(str, Enum):
    FULL = "full"
    ALWAYS_RET = "always_ret"
    EXTERNAL_SCORER_PASSAGES = "external_scorer_passages"
    RANDOM_PASSAGES_NOREL = "random_passages_norel"
    NO_KB = "no_kb"


def variant_config(name: AblationName, base: PipelineConfig) -> PipelineConfig:
    """Fixed name-to-config mapping; every variant is config-only."""
    name = AblationName(name)
    if name is AblationName.FULL:
        return base
    if name is AblationName.ALWAYS_RET:
        return PipelineConfig(
            top_k_docs=base.top_k_docs,
            rerank=base.rerank,
            selection=SelectionMode.REFLECTIVE,
            max_relevant=base.max_relevant,
            force_decision=ForcedDecision.ALWAYS_RET,
            seed=base.seed,
        )
    if name is AblationName.EXTERNAL_SCORER_PASSAGES:
        return PipelineConfig(
            top_k_docs=base.top_k_docs,
            selection=SelectionMode.EXTERNAL_SCORER,
            external_scorer_top=base.external_scorer_top,
            seed=base.seed,
        )
    if name is AblationName.RANDOM_PASSAGES_NOREL:
        return PipelineConfig(
            top_k_docs=base.top_k_docs,
            selection=SelectionMode.RANDOM_PER_DOC,
            random_passages_per_doc=base.random_passages_per_doc,
            seed=base.seed,
        )
    if name is AblationName.NO_KB:
        return PipelineConfig(
            top_k_docs=base.top_k_docs,
            force_decision=ForcedDecision.ALWAYS_NORET,
            seed=base.seed,
        )
    raise ValueError(f"unknown ablation variant {name!r}")


@dataclass(frozen=True)
class AblationVariant:
    name: AblationName
    config: PipelineConfig


@dataclass(frozen=True)
class EvalReport:
    num_samples: int
    metrics: dict[str, MetricScore]
    splits: dict[str, dict[str, float]]
    aggregation: str  # "harmonic" | "mean"
    trace_stats: dict

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "metrics": {
                name: {"value": score.value, "num_samples": score.num_samples}
                for name, score in sorted(self.metrics.items())
            },
            "splits": {k: dict(sorted(v.items())) for k, v in sorted(self.splits.items())},
            "aggregation": self.aggregation,
            "trace_stats": self.trace_stats,
        }


def score_answer(
    pred: str, golds: Sequence[str], rel_tol: float = 0.05
) -> dict[str, float]:
    f1 = max((token_f1_em(pred, g)[0] for g in golds), default=0.0)
    em = max((token_f1_em(pred, g)[1] for g in golds), default=0)
    return {
        "vqa_accuracy": float(vqa_accuracy(pred, golds)),
        "relaxed_accuracy": float(relaxed_accuracy(pred, golds, rel_tol)),
        "token_f1": f1,
        "exact_match": float(em),
    }


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def evaluate_traces(
    trace_dicts: Sequence[dict],
    samples: Sequence[QuerySample],
    rel_tol: float = 0.05,
) -> EvalReport:
    """Score serialized traces against their samples' gold answers."""
    samples_by_id = {s.id: s for s in samples}
    rows = []
    for trace in sorted(trace_dicts, key=lambda t: t["sample_id"]):
        sample = samples_by_id.get(trace["sample_id"])
        if sample is None:
            raise KeyError(f"trace sample id {trace['sample_id']!r} not in dataset")
        if not sample.gold_answers:
            continue
        scores = score_answer(trace["answer"], sample.gold_answers, rel_tol)
        rows.append((sample, trace, scores))
    if not rows:
        raise ValueError("nothing to score: no traces with gold answers")

    metrics = {
        name: MetricScore(
            name=name,
            value=_mean([scores[name] for _, _, scores in rows]),
            num_samples=len(rows),
        )
        for name in SCORED_METRICS
    }

    subsets = sorted({s.subset for s, _, _ in rows if s.subset is not None})
    splits: dict[str, dict[str, float]] = {}
    for subset in subsets:
        group = [scores for s, _, scores in rows if s.subset == subset]
        entry = {name: _mean([g[name] for g in group]) for name in SCORED_METRICS}
        entry["num_samples"] = float(len(group))
        splits[subset] = entry
    harmonic = (
        set(subsets) == HARMONIC_SUBSETS
        and all(s.subset in HARMONIC_SUBSETS for s, _, _ in rows)
    )
    if harmonic:
        all_entry = {
            name: infoseek_aggregate(
                splits["unseen_q"][name], splits["unseen_e"][name]
            )
            for name in SCORED_METRICS
        }
    else:
        all_entry = {name: metrics[name].value for name in SCORED_METRICS}
    all_entry["num_samples"] = float(len(rows))
    splits["all"] = all_entry

    decisions = [t["decision"]["token"] for _, t, _ in rows]
    distribution = {
        tok.value: decisions.count(tok.value) / len(decisions)
        for tok in (ReflectiveToken.RET, ReflectiveToken.NORET)
    }
    trace_stats = {
        "decision_distribution": distribution,
        "fallback_rate": _mean([float(t["fallback"]) for _, t, _ in rows]),
        "mean_selected": _mean([float(len(t["selected"])) for _, t, _ in rows]),
        "forced_rate": _mean([float(t["forced"]) for _, t, _ in rows]),
        "judge_failures": sum(t["judge_failures"] for _, t, _ in rows),
    }
    return EvalReport(
        num_samples=len(rows),
        metrics=metrics,
        splits=splits,
        aggregation="harmonic" if harmonic else "mean",
        trace_stats=trace_stats,
    )


@dataclass(frozen=True)
class EvalRun:
    report: EvalReport
    traces: list[dict]
    failures: list[tuple[str, str]]


def evaluate_dataset(
    engine: ReflectiveEngine,
    samples: Sequence[QuerySample],
    config: PipelineConfig,
    jobs: int = 1,
    rel_tol: float = 0.05,
    include_timings: bool = True,
) -> EvalRun:
    """Run the pipeline over a dataset and score the results.

    Samples run independently (optionally in parallel); traces are assembled
    in sample-id order so concurrency never changes the output.
    """
    ordered = sorted(samples, key=lambda s: s.id)

    def run_one(sample: QuerySample) -> tuple[str, dict | None, str | None]:
        try:
            trace = engine.run(sample, config)
            return sample.id, trace_to_dict(trace, include_timings), None
        except Exception as exc:  # noqa: BLE001 - failures become the manifest
            return sample.id, None, f"{type(exc).__name__}: {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one, ordered))
    else:
        results = [run_one(s) for s in ordered]

    traces = [t for _, t, _ in results if t is not None]
    failures = [(sid, err) for sid, _, err in results if err is not None]
    for sid, err in failures:
        logger.error("pipeline failed for %s: %s", sid, err)
    if not traces:
        raise RuntimeError("every sample failed; no report to produce")
    report = evaluate_traces(traces, ordered, rel_tol)
    return EvalRun(report=report, traces=traces, failures=failures)


def run_ablation(
    engine: ReflectiveEngine,
    samples: Sequence[QuerySample],
    variants: Sequence[AblationVariant],
    jobs: int = 1,
    rel_tol: float = 0.05,
) -> dict[str, EvalReport]:
    reports: dict[str, EvalReport] = {}
    for variant in variants:
        run = evaluate_dataset(engine, samples, variant.config, jobs, rel_tol)
        if run.failures:
            raise RuntimeError(
                f"variant {variant.name.value}: {len(run.failures)} samples failed"
            )
        reports[variant.name.value] = run.report
    return reports


# --------------------------------------------------------------------------
# Reflective-token accuracy
# --------------------------------------------------------------------------

PASSAGE_DIFFICULTIES = ("pos", "soft", "hard")


@dataclass(frozen=True)
class PassageExpectation:
    doc_id: str
    section_index: int
    difficulty: str  # pos -> expect REL; soft/hard -> expect NOREL

    def __post_init__(self):
        if self.difficulty not in PASSAGE_DIFFICULTIES:
            raise ValueError(f"unknown difficulty {self.difficulty!r}")


@dataclass(frozen=True)
class TokenExpectation:
    sample_id: str
    expected_decision: str | None = None  # "<RET>" | "<NORET>" | None
    passages: tuple[PassageExpectation, ...] = ()


def load_expectations(path: str | Path) -> list[TokenExpectation]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        out.append(
            TokenExpectation(
                sample_id=str(obj["id"]),
                expected_decision=obj.get("expected_decision"),
                passages=tuple(
                    PassageExpectation(
                        doc_id=p["doc_id"],
                        section_index=int(p["section_index"]),
                        difficulty=p["difficulty"],
                    )
                    for p in obj.get("passages", ())
                ),
            )
        )
    return out


def token_accuracy(
    trace_dicts: Sequence[dict], expectations: Sequence[TokenExpectation]
) -> dict:
    """Accuracy per token class and per passage difficulty.

    Decision accuracy is bucketed by the expected token (RET vs NORET);
    judgment accuracy by the expected passage difficulty (pos expects REL,
    soft and hard expect NOREL). Expected passages the trace never judged
    are reported in ``missing_judgments``.
    """
    traces_by_id = {t["sample_id"]: t for t in trace_dicts}
    classes = {
        name: {"correct": 0, "total": 0}
        for name in ("ret", "noret", "rel_pos", "norel_soft", "norel_hard")
    }
    missing = 0
    for exp in expectations:
        trace = traces_by_id.get(exp.sample_id)
        if trace is None:
            raise KeyError(f"no trace for expected sample id {exp.sample_id!r}")
        if exp.expected_decision is not None:
            bucket = "ret" if exp.expected_decision == ReflectiveToken.RET.value else "noret"
            classes[bucket]["total"] += 1
            # Forced decisions would trivialize the measurement; score the raw
            # argmax outcome instead.
            raw = (
                ReflectiveToken.RET.value
                if trace["decision"]["logp_ret"] > trace["decision"]["logp_noret"]
                else ReflectiveToken.NORET.value
            )
            if raw == exp.expected_decision:
                classes[bucket]["correct"] += 1
        if not exp.passages:
            continue
        judged = {
            (j["doc_id"], j["section_index"]): j["token"] for j in trace["judgments"]
        }
        for pexp in exp.passages:
            token = judged.get((pexp.doc_id, pexp.section_index))
            if token is None:
                missing += 1
                continue
            if pexp.difficulty == "pos":
                bucket, expected = "rel_pos", ReflectiveToken.REL.value
            elif pexp.difficulty == "soft":
                bucket, expected = "norel_soft", ReflectiveToken.NOREL.value
            else:
                bucket, expected = "norel_hard", ReflectiveToken.NOREL.value
            classes[bucket]["total"] += 1
            if token == expected:
                classes[bucket]["correct"] += 1
    report = {
        name: {
            "correct": c["correct"],
            "total": c["total"],
            "accuracy": (c["correct"] / c["total"]) if c["total"] else None,
        }
        for name, c in classes.items()
    }
    return {"classes": report, "missing_judgments": missing}


# --------------------------------------------------------------------------
# Remote answer judge (pluggable; disabled in hermetic runs)
# --------------------------------------------------------------------------

JUDGE_PROMPT_TEMPLATE = (
    "You are trying to evaluate the alignment between a predicted answer and "
    "a ground-truth answer for a given question-image pair. To do this, "
    "consider the context provided by the question itself and the caption of "
    "the query image.\n"
    "# Question: {question}\n"
    "# Image Caption: {caption}\n"
    "# Ground-truth Answer: {gold}\n"
    "# Predicted Answer: {pred}\n"
    "You have to determine the alignment between the predicted answer and "
    "the ground-truth on a scale from 0 to 100, where 0 indicates no "
    "alignment and 100 indicates perfect alignment. Your response should be "
    "in JSON format, outputting a list where each element is a dictionary "
    "representing a candidate with:\n"
    '"score": a numeric value between 0 and 100 indicating the alignment level,\n'
    '"reason": a string explaining the rationale for the given score.'
)


class RemoteAnswerJudge:
    """Scores answer alignment 0..100 via POST /v1/judge.

    Request carries the documented fields plus the rendered prompt; response
    is ``{"score": 0..100, "reason": str}``.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, max_retries: int = 3):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries

    def judge(self, question: str, caption: str, gold: str, pred: str) -> dict:
        body = post_json(
            f"{self.endpoint}/v1/judge",
            {
                "question": question,
                "caption": caption,
                "ground_truth_answer": gold,
                "predicted_answer": pred,
                "prompt": JUDGE_PROMPT_TEMPLATE.format(
                    question=question, caption=caption, gold=gold, pred=pred
                ),
            },
            timeout=self.timeout,
            max_retries=self.max_retries,
        )
        score = float(body["score"])
        if not 0.0 <= score <= 100.0:
            raise ValueError(f"judge score {score} out of range")
        return {"score": score, "reason": str(body.get("reason", ""))}


# --------------------------------------------------------------------------
# Report output
# --------------------------------------------------------------------------


def reports_to_json(reports: dict[str, EvalReport], seed: int | None = None) -> str:
    payload: dict = {"variants": {k: v.to_dict() for k, v in sorted(reports.items())}}
    if seed is not None:
        payload["seed"] = seed
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=True) + "\n"


def reports_to_csv(reports: dict[str, EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    split_names = sorted({s for r in reports.values() for s in r.splits})
    header = ["variant", "num_samples", *SCORED_METRICS]
    header += [f"{split}:vqa_accuracy" for split in split_names]
    writer.writerow(header)
    for name, report in sorted(reports.items()):
        row = [name, report.num_samples]
        row += [f"{report.metrics[m].value:.4f}" for m in SCORED_METRICS]
        for split in split_names:
            value = report.splits.get(split, {}).get("vqa_accuracy")
            row.append("" if value is None else f"{value:.4f}")
        writer.writerow(row)
    return buf.getvalue()


def write_report(path: str | Path, reports: dict[str, EvalReport], seed: int | None = None) -> None:
    atomic_write_text(path, reports_to_json(reports, seed))
