"""Generative backends: constrained decoding with per-candidate logprobs.

The pipeline never touches model weights; it talks to a backend that accepts
a segment-list prompt, an optional vocabulary restriction, and an optional
token budget, and returns emitted tokens with per-step log-probabilities.
Two implementations ship here: a deterministic scripted mock for hermetic
runs, and an HTTP client for a live model server.

Wire protocol (POST {endpoint}/v1/generate)::

    request  {"segments": [{"kind": str, "payload": str}],
              "allowed_tokens": [str] | null, "max_tokens": int | null}
    response {"tokens": [str], "chosen_logprobs": [float],
              "candidates": [{token: logprob}, ...]}
"""
from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from ._http import RemoteServiceError, TransportError, post_json
from .prompts import PromptSegment, SegmentKind, prompt_fingerprint
from .tokens import CONTROL_TOKENS

logger = logging.getLogger(__name__)

# Constrained single-token steps ought to renormalize over the restricted
# vocabulary, but real servers report slightly unnormalized values; allow a
# small overshoot instead of rejecting them.
PROBABILITY_SUM_SLACK = 1e-2


class BackendError(Exception):
    pass


class ProtocolViolationError(BackendError):
    """Backend emitted a token outside the allowed vocabulary."""


class ConformanceError(BackendError):
    """Backend does not declare all required control tokens."""


class UnscriptedPromptError(BackendError):
    def __init__(self, fingerprint: str, detail: str = ""):
        msg = f"no script registered for prompt fingerprint {fingerprint}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.fingerprint = fingerprint


class ScriptError(BackendError):
    pass


@dataclass(frozen=True)
class GenerationResult:
    """Tokens plus per-step log-probabilities.

    ``candidate_logprobs[i]`` maps each permitted token at step i to its
    log-probability; the chosen token is always present in its step map.
    """

    tokens: tuple[str, ...]
    chosen_logprobs: tuple[float, ...]
    candidate_logprobs: tuple[Mapping[str, float], ...]

    @property
    def text(self) -> str:
        return "".join(self.tokens)


def validate_generation_result(
    result: GenerationResult, allowed: frozenset[str] | None
) -> None:
    if not (len(result.tokens) == len(result.chosen_logprobs) == len(result.candidate_logprobs)):
        raise ProtocolViolationError(
            "tokens, chosen_logprobs and candidates must be aligned"
        )
    for step, (tok, logp, cands) in enumerate(
        zip(result.tokens, result.chosen_logprobs, result.candidate_logprobs)
    ):
        if allowed is not None and tok not in allowed:
            raise ProtocolViolationError(
                f"step {step}: token {tok!r} outside allowed vocabulary"
            )
        if tok not in cands:
            raise ProtocolViolationError(
                f"step {step}: chosen token {tok!r} missing from candidate map"
            )
        if not math.isfinite(logp):
            raise ProtocolViolationError(f"step {step}: non-finite logprob")
        total = sum(math.exp(lp) for lp in cands.values())
        if total > 1.0 + PROBABILITY_SUM_SLACK:
            raise ProtocolViolationError(
                f"step {step}: candidate probabilities sum to {total:.4f} > 1"
            )


class GenerativeBackend(Protocol):
    """Shareable across threads; one call per constrained decoding step."""

    control_tokens: frozenset[str]

    def constrained_generate(
        self,
        prompt: Sequence[PromptSegment],
        allowed: Iterable[str] | None = None,
        max_tokens: int | None = None,
    ) -> GenerationResult: ...


def check_backend_conformance(backend: GenerativeBackend) -> None:
    """All four reflective tokens plus the paragraph markers must be declared."""
    missing = CONTROL_TOKENS - frozenset(backend.control_tokens)
    if missing:
        raise ConformanceError(
            f"backend does not declare control tokens: {sorted(missing)}"
        )


# --------------------------------------------------------------------------
# Scripted mock
# --------------------------------------------------------------------------

PromptMatcher = Callable[[Sequence[PromptSegment]], bool]


def match_fingerprint(fingerprint: str) -> PromptMatcher:
    return lambda prompt: prompt_fingerprint(prompt) == fingerprint


def match_user_text(text: str) -> PromptMatcher:
    return lambda prompt: any(
        s.kind is SegmentKind.USER_TEXT and s.payload == text for s in prompt
    )


def match_user_text_contains(fragment: str) -> PromptMatcher:
    return lambda prompt: any(
        s.kind is SegmentKind.USER_TEXT and fragment in s.payload for s in prompt
    )


def match_passage_contains(fragment: str) -> PromptMatcher:
    return lambda prompt: any(
        s.kind is SegmentKind.PASSAGE_BLOCK and fragment in s.payload for s in prompt
    )


def match_all(*matchers: PromptMatcher) -> PromptMatcher:
    return lambda prompt: all(m(prompt) for m in matchers)


@dataclass(frozen=True)
class ScriptedResponse:
    """What the scripted model 'wants' to emit for a matching prompt.

    ``candidates[i]`` is the step-i distribution over tokens the script knows
    about; omitted steps default to certainty on the scripted token.
    """

    tokens: tuple[str, ...]
    candidates: tuple[Mapping[str, float], ...] | None = None


@dataclass(frozen=True)
class CallRecord:
    fingerprint: str
    allowed: frozenset[str] | None
    max_tokens: int | None


@dataclass
class _ScriptRule:
    matcher: PromptMatcher
    allowed: frozenset[str] | None  # None = matches any vocabulary restriction
    response: ScriptedResponse | None
    failure: str | None = None


class MockBackend:
    """Deterministic scripted backend for hermetic pipeline runs.

    Rules are tried in registration order; the first whose matcher accepts
    the prompt (and whose ``allowed`` guard, if any, equals the call's
    restriction) wins. Register everything up front: the rule list is
    read-only during generation, so concurrent calls are safe.
    """

    def __init__(self, control_tokens: Iterable[str] = CONTROL_TOKENS):
        self.control_tokens = frozenset(control_tokens)
        self._rules: list[_ScriptRule] = []
        self.calls: list[CallRecord] = []  # appended under the GIL; test aid

    def register_script(
        self,
        matcher: PromptMatcher,
        response: ScriptedResponse,
        allowed: Iterable[str] | None = None,
    ) -> None:
        guard = None if allowed is None else frozenset(allowed)
        self._rules.append(_ScriptRule(matcher, guard, response))

    def register_failure(
        self,
        matcher: PromptMatcher,
        message: str,
        allowed: Iterable[str] | None = None,
    ) -> None:
        """Inject a backend error for matching calls (fault testing)."""
        guard = None if allowed is None else frozenset(allowed)
        self._rules.append(_ScriptRule(matcher, guard, None, failure=message))

    def _find(
        self, prompt: Sequence[PromptSegment], allowed: frozenset[str] | None
    ) -> _ScriptRule:
        for rule in self._rules:
            if rule.allowed is not None and rule.allowed != allowed:
                continue
            if rule.matcher(prompt):
                return rule
        user_texts = [s.payload for s in prompt if s.kind is SegmentKind.USER_TEXT]
        raise UnscriptedPromptError(
            prompt_fingerprint(prompt),
            f"allowed={sorted(allowed) if allowed else None} user_text={user_texts!r}",
        )

    def constrained_generate(
        self,
        prompt: Sequence[PromptSegment],
        allowed: Iterable[str] | None = None,
        max_tokens: int | None = None,
    ) -> GenerationResult:
        allowed_set = None if allowed is None else frozenset(allowed)
        self.calls.append(
            CallRecord(prompt_fingerprint(prompt), allowed_set, max_tokens)
        )
        rule = self._find(prompt, allowed_set)
        if rule.failure is not None:
            raise BackendError(rule.failure)
        response = rule.response
        assert response is not None
        limit = len(response.tokens)
        if max_tokens is not None:
            limit = min(limit, max_tokens)
        tokens: list[str] = []
        chosen_logprobs: list[float] = []
        candidate_maps: list[dict[str, float]] = []
        for step in range(limit):
            wanted = response.tokens[step]
            cands = dict(
                response.candidates[step]
                if response.candidates is not None and step < len(response.candidates)
                else {wanted: 0.0}
            )
            if allowed_set is not None:
                cands = {t: lp for t, lp in cands.items() if t in allowed_set}
                if not cands:
                    raise ScriptError(
                        f"step {step}: script candidates are disjoint from the "
                        f"allowed vocabulary {sorted(allowed_set)}"
                    )
            # Server-side constraint enforcement: honor the scripted token if
            # permitted, otherwise fall back to the best permitted candidate
            # (ties resolve to the earliest-listed token).
            chosen = wanted if wanted in cands else max(cands, key=lambda t: cands[t])
            tokens.append(chosen)
            chosen_logprobs.append(cands[chosen])
            candidate_maps.append(cands)
        result = GenerationResult(
            tokens=tuple(tokens),
            chosen_logprobs=tuple(chosen_logprobs),
            candidate_logprobs=tuple(candidate_maps),
        )
        validate_generation_result(result, allowed_set)
        return result


def load_script_file(backend: MockBackend, path: str | Path) -> int:
    """Register scripts from a JSON file; returns the number registered.

    Format: a list of entries ``{"match": {...}, "allowed": [...] | null,
    "tokens": [...], "candidates": [{tok: logprob}, ...] | null}`` where
    ``match`` may combine ``user_text``, ``user_text_contains``,
    ``passage_contains`` and ``fingerprint`` conditions (all must hold).
    """
    entries = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(entries, list):
        raise ScriptError(f"{path}: script file must contain a JSON list")
    for i, entry in enumerate(entries):
        match_spec = entry.get("match", {})
        matchers: list[PromptMatcher] = []
        if "user_text" in match_spec:
            matchers.append(match_user_text(match_spec["user_text"]))
        if "user_text_contains" in match_spec:
            matchers.append(match_user_text_contains(match_spec["user_text_contains"]))
        if "passage_contains" in match_spec:
            matchers.append(match_passage_contains(match_spec["passage_contains"]))
        if "fingerprint" in match_spec:
            matchers.append(match_fingerprint(match_spec["fingerprint"]))
        if not matchers:
            raise ScriptError(f"{path}: entry {i} has no match conditions")
        candidates = entry.get("candidates")
        response = ScriptedResponse(
            tokens=tuple(entry["tokens"]),
            candidates=None
            if candidates is None
            else tuple({str(k): float(v) for k, v in c.items()} for c in candidates),
        )
        backend.register_script(
            match_all(*matchers), response, allowed=entry.get("allowed")
        )
    return len(entries)


# --------------------------------------------------------------------------
# Remote client
# --------------------------------------------------------------------------


class RemoteBackend:
    """HTTP client for a model server implementing the generation protocol.

    In-flight requests are capped by a semaphore; transport failures retry
    with exponential backoff inside :func:`post_json`. A response containing
    a token outside the allowed set is a protocol violation, never silently
    accepted.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 0.25,
        max_inflight: int = 8,
        control_tokens: Iterable[str] = CONTROL_TOKENS,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.control_tokens = frozenset(control_tokens)
        self._inflight = threading.BoundedSemaphore(max(1, max_inflight))

    def constrained_generate(
        self,
        prompt: Sequence[PromptSegment],
        allowed: Iterable[str] | None = None,
        max_tokens: int | None = None,
    ) -> GenerationResult:
        allowed_set = None if allowed is None else frozenset(allowed)
        payload = {
            "segments": [s.to_dict() for s in prompt],
            "allowed_tokens": sorted(allowed_set) if allowed_set is not None else None,
            "max_tokens": max_tokens,
        }
        with self._inflight:
            body = post_json(
                f"{self.endpoint}/v1/generate",
                payload,
                timeout=self.timeout,
                max_retries=self.max_retries,
                backoff=self.backoff,
            )
        try:
            result = GenerationResult(
                tokens=tuple(str(t) for t in body["tokens"]),
                chosen_logprobs=tuple(float(x) for x in body["chosen_logprobs"]),
                candidate_logprobs=tuple(
                    {str(k): float(v) for k, v in c.items()} for c in body["candidates"]
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolViolationError(f"malformed generation response: {exc}") from exc
        validate_generation_result(result, allowed_set)
        return result


__all__ = [
    "BackendError",
    "CallRecord",
    "ConformanceError",
    "GenerationResult",
    "GenerativeBackend",
    "MockBackend",
    "ProtocolViolationError",
    "RemoteBackend",
    "RemoteServiceError",
    "ScriptError",
    "ScriptedResponse",
    "TransportError",
    "UnscriptedPromptError",
    "check_backend_conformance",
    "load_script_file",
    "match_all",
    "match_fingerprint",
    "match_passage_contains",
    "match_user_text",
    "match_user_text_contains",
    "validate_generation_result",
]
