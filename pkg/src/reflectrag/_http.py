"""Minimal JSON-over-HTTP helper shared by the remote clients.

Retries transport-level failures (connection errors, timeouts, 5xx) with
exponential backoff; 4xx responses fail immediately.
"""
from __future__ import annotations

import logging
import time

import requests

logger = logging.getLogger(__name__)


class TransportError(Exception):
    """Remote service unreachable after retries."""

    def __init__(self, url: str, attempts: int, last_error: str):
        super().__init__(
            f"request to {url} failed after {attempts} attempt(s): {last_error}"
        )
        self.url = url
        self.attempts = attempts
        self.last_error = last_error


class RemoteServiceError(Exception):
    """Remote service answered with a non-retryable error."""

    def __init__(self, url: str, status: int, body: str):
        super().__init__(f"{url} returned HTTP {status}: {body[:200]}")
        self.status = status


def post_json(
    url: str,
    payload: dict,
    timeout: float = 30.0,
    max_retries: int = 3,
    backoff: float = 0.25,
) -> dict:
    attempts = 0
    last_error = "no attempt made"
    while attempts < max(1, max_retries):
        attempts += 1
        try:
            resp = requests.post(url, json=payload, timeout=timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last_error = str(exc)
        else:
            if resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
            elif resp.status_code >= 400:
                raise RemoteServiceError(url, resp.status_code, resp.text)
            else:
                return resp.json()
        if attempts < max(1, max_retries):
            delay = backoff * (2 ** (attempts - 1))
            logger.debug("retrying %s in %.2fs (%s)", url, delay, last_error)
            time.sleep(delay)
    raise TransportError(url, attempts, last_error)
