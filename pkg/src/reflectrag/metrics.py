"""Answer-scoring metrics and split aggregation."""
from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

_ARTICLES = frozenset({"a", "an", "the"})
_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})
_NUMBER_RE = re.compile(r"[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?")

VALID_METRIC_NAMES = frozenset(
    {
        "vqa_accuracy",
        "relaxed_accuracy",
        "token_f1",
        "exact_match",
        "recall_at_k",
        "token_accuracy",
    }
)


@dataclass(frozen=True)
class MetricScore:
    name: str
    value: float
    num_samples: int

    def __post_init__(self):
        if self.name not in VALID_METRIC_NAMES:
            raise ValueError(f"unknown metric name {self.name!r}")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} out of [0, 1]")
        if self.num_samples <= 0:
            raise ValueError("num_samples must be positive")


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation, strip articles, collapse whitespace."""
    lowered = text.lower().translate(_PUNCT_TABLE)
    tokens = [t for t in lowered.split() if t not in _ARTICLES]
    return " ".join(tokens)


def answer_tokens(text: str) -> list[str]:
    return normalize_answer(text).split()


def vqa_accuracy(pred: str, golds: Sequence[str]) -> int:
    """1 iff the normalized prediction equals any normalized gold."""
    if not golds:
        raise ValueError("golds must be non-empty")
    norm_pred = normalize_answer(pred)
    return int(any(norm_pred == normalize_answer(g) for g in golds))


def parse_number(text: str) -> float | None:
    """The numeric value of an answer, or None if it is not purely numeric."""
    cleaned = text.strip().replace(",", "")
    match = _NUMBER_RE.fullmatch(cleaned)
    if match is None:
        return None
    try:
        value = float(cleaned)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def relaxed_accuracy(pred: str, golds: Sequence[str], rel_tol: float = 0.05) -> int:
    """Numeric answers match within a relative tolerance of the gold value.

    A gold of exactly 0 requires an exact 0. Non-numeric golds fall back to
    plain string accuracy.
    """
    if not 0.0 < rel_tol < 1.0:
        raise ValueError("rel_tol must lie in (0, 1)")
    numeric_golds = [(g, parse_number(g)) for g in golds]
    numeric = [v for _, v in numeric_golds if v is not None]
    non_numeric = [g for g, v in numeric_golds if v is None]
    pred_value = parse_number(pred)
    if numeric and pred_value is not None:
        for gold_value in numeric:
            if gold_value == 0.0:
                if pred_value == 0.0:
                    return 1
            elif abs(pred_value - gold_value) <= rel_tol * abs(gold_value):
                return 1
    if non_numeric:
        return vqa_accuracy(pred, non_numeric)
    return 0


def token_f1_em(pred: str, gold: str) -> tuple[float, int]:
    """Bag-of-tokens F1 plus exact match over normalized text.

    Empty vs empty scores (1.0, 1); empty vs non-empty scores (0.0, 0).
    """
    pred_tokens = answer_tokens(pred)
    gold_tokens = answer_tokens(gold)
    em = int(normalize_answer(pred) == normalize_answer(gold))
    if not pred_tokens and not gold_tokens:
        return 1.0, 1
    if not pred_tokens or not gold_tokens:
        return 0.0, 0
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0, em
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall), em


def infoseek_aggregate(unseen_q: float, unseen_e: float) -> float:
    """Harmonic mean of the two split scores; 0 if either is 0.

    Scale-free: works for fractions or percentages alike.
    """
    if unseen_q < 0 or unseen_e < 0:
        raise ValueError("scores must be non-negative")
    if unseen_q == 0 or unseen_e == 0:
        return 0.0
    return 2 * unseen_q * unseen_e / (unseen_q + unseen_e)
