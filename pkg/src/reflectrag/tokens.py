"""Control tokens used by the reflective generation protocol.

Two pairs gate the pipeline: ``<RET>``/``<NORET>`` decide whether external
knowledge is retrieved at all, and ``<REL>``/``<NOREL>`` judge each candidate
passage. ``<paragraph>`` / ``</paragraph>`` delimit passage bodies inside
prompts.
"""
from __future__ import annotations

from enum import Enum


class ReflectiveToken(str, Enum):
    RET = "<RET>"
    NORET = "<NORET>"
    REL = "<REL>"
    NOREL = "<NOREL>"


PARAGRAPH_OPEN = "<paragraph>"
PARAGRAPH_CLOSE = "</paragraph>"

DECISION_TOKENS = frozenset({ReflectiveToken.RET.value, ReflectiveToken.NORET.value})
RELEVANCE_TOKENS = frozenset({ReflectiveToken.REL.value, ReflectiveToken.NOREL.value})

#: Every control token a conforming backend must declare support for.
CONTROL_TOKENS = frozenset(
    {*DECISION_TOKENS, *RELEVANCE_TOKENS, PARAGRAPH_OPEN, PARAGRAPH_CLOSE}
)
