"""Prompt construction for the four pipeline stages.

Prompts are sequences of typed segments, not rendered strings: the generative
backend owns tokenization and chat formatting, while this module owns the
canonical segment order, which is bit-exact and golden-tested. A display
renderer approximating the LLaMA-3.1 chat layout is provided for debugging.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .tokens import PARAGRAPH_CLOSE, PARAGRAPH_OPEN, ReflectiveToken

SYSTEM_MESSAGE = (
    "You are a helpful language and vision assistant. You are able to "
    "understand the visual content that the user provides, and assist the "
    "user with a variety of tasks using natural language."
)
CONSIDER_PARAGRAPH = "Consider this paragraph:"
SHORT_ANSWER_INSTRUCTION = "Give a short answer."


class SegmentKind(str, Enum):
    SYSTEM = "system"
    IMAGE_REF = "image_ref"
    USER_TEXT = "user_text"
    CONTROL_TOKEN = "control_token"
    PASSAGE_BLOCK = "passage_block"
    ASSISTANT_START = "assistant_start"


@dataclass(frozen=True)
class PromptSegment:
    """One unit of a prompt. ImageRef payloads are opaque ids, never pixels."""

    kind: SegmentKind
    payload: str

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "payload": self.payload}


class PromptStage(str, Enum):
    DECISION = "decision"
    JUDGMENT = "judgment"
    ANSWER_WITH_PASSAGES = "answer_with_passages"
    ANSWER_DIRECT = "answer_direct"


class PromptBuildError(ValueError):
    """Stage/passage arity mismatch."""


def build_prompt(
    stage: PromptStage,
    question: str,
    image_ref: str,
    passage_texts: Sequence[str] | None = None,
) -> list[PromptSegment]:
    """Build the canonical segment sequence for one protocol stage.

    Judgment prompts embed exactly one passage; answer-with-passages prompts
    embed one block per selected passage, each wrapped in paragraph markers by
    the renderer/backend.
    """
    base = [
        PromptSegment(SegmentKind.SYSTEM, SYSTEM_MESSAGE),
        PromptSegment(SegmentKind.IMAGE_REF, image_ref),
        PromptSegment(SegmentKind.USER_TEXT, question),
        PromptSegment(SegmentKind.ASSISTANT_START, ""),
    ]
    if stage is PromptStage.DECISION:
        if passage_texts:
            raise PromptBuildError("decision prompt takes no passages")
        return base
    if stage is PromptStage.ANSWER_DIRECT:
        if passage_texts:
            raise PromptBuildError("direct-answer prompt takes no passages")
        return base + [
            PromptSegment(SegmentKind.CONTROL_TOKEN, ReflectiveToken.NORET.value)
        ]
    if passage_texts is None:
        raise PromptBuildError(f"{stage.value} prompt requires passages")
    passages = list(passage_texts)
    if stage is PromptStage.JUDGMENT and len(passages) != 1:
        raise PromptBuildError(
            f"judgment prompt embeds exactly one passage, got {len(passages)}"
        )
    if stage is PromptStage.ANSWER_WITH_PASSAGES and not passages:
        raise PromptBuildError("answer prompt requires at least one passage")
    segments = base + [
        PromptSegment(SegmentKind.CONTROL_TOKEN, ReflectiveToken.RET.value),
        PromptSegment(SegmentKind.USER_TEXT, CONSIDER_PARAGRAPH),
    ]
    segments.extend(PromptSegment(SegmentKind.PASSAGE_BLOCK, text) for text in passages)
    segments.append(PromptSegment(SegmentKind.USER_TEXT, SHORT_ANSWER_INSTRUCTION))
    segments.append(PromptSegment(SegmentKind.ASSISTANT_START, ""))
    return segments


def segments_to_dicts(segments: Sequence[PromptSegment]) -> list[dict]:
    return [seg.to_dict() for seg in segments]


def prompt_fingerprint(segments: Sequence[PromptSegment]) -> str:
    """Stable hash of the canonical segment list.

    Scripted mocks key on this, so it must not depend on incidental
    formatting; only kinds and payloads enter the digest.
    """
    blob = json.dumps(
        segments_to_dicts(segments), sort_keys=True, separators=(",", ":")
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def render_prompt(segments: Sequence[PromptSegment]) -> str:
    """Debug rendering in the LLaMA-3.1 chat layout. Display only."""
    turns: list[tuple[str, list[str]]] = []
    for seg in segments:
        if seg.kind is SegmentKind.SYSTEM:
            turns.append(("system", [seg.payload]))
        elif seg.kind is SegmentKind.ASSISTANT_START:
            turns.append(("assistant", []))
        elif seg.kind is SegmentKind.CONTROL_TOKEN:
            if not turns or turns[-1][0] != "assistant":
                turns.append(("assistant", []))
            turns[-1][1].append(seg.payload)
        else:
            part = seg.payload
            if seg.kind is SegmentKind.IMAGE_REF:
                part = "<image>"
            elif seg.kind is SegmentKind.PASSAGE_BLOCK:
                part = f"{PARAGRAPH_OPEN}{seg.payload}{PARAGRAPH_CLOSE}"
            if turns and turns[-1][0] == "user":
                turns[-1][1].append(part)
            else:
                turns.append(("user", [part]))
    out = ["<|begin_of_text|>"]
    for i, (role, parts) in enumerate(turns):
        out.append(f"<|start_header_id|>{role}<|end_header_id|>\n")
        out.append("\n".join(parts))
        open_assistant = i == len(turns) - 1 and role == "assistant" and not parts
        if not open_assistant:
            out.append("<|eot_id|>")
    return "".join(out)
