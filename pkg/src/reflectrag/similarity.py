"""Text-similarity scoring used for shortlists and the no-relevance-token
ablation. The default scorer is a deliberately simple lexical overlap so the
whole pipeline runs hermetically; plug in a dense scorer for real corpora."""
from __future__ import annotations

import re
from typing import Protocol

_WORD_RE = re.compile(r"[a-z0-9]+")


def word_tokens(text: str) -> list[str]:
    """Lowercased alphanumeric tokens; punctuation acts as a separator."""
    return _WORD_RE.findall(text.lower())


class TextSimilarityScorer(Protocol):
    def score(self, query: str, text: str) -> float: ...


class LexicalOverlapScorer:
    """Fraction of distinct query tokens that also occur in the text."""

    def score(self, query: str, text: str) -> float:
        query_tokens = set(word_tokens(query))
        if not query_tokens:
            return 0.0
        text_tokens = set(word_tokens(text))
        return len(query_tokens & text_tokens) / len(query_tokens)
