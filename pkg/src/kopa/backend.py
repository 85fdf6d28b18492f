"""Pluggable HTTP completion client for running prompt corpora against a
real language-model service.

Wire format is intentionally minimal and provider-agnostic: each instance
is serialized to one prompt string and POSTed as JSON ``{<prompt_field>:
prompt}``; the response must be JSON carrying the completion text under
``<response_field>``. Retries use exponential backoff and honor
``Retry-After`` on 429/5xx.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import requests

from .errors import ConfigError
from .prompts import UNKNOWN, PromptInstance, parse_answer, render_prompt

log = logging.getLogger(__name__)

_RETRIABLE = {429, 500, 502, 503, 504}


@dataclass
class CompletionBackend:
    endpoint: str
    timeout: float = 30.0
    max_retries: int = 3
    prompt_field: str = "prompt"
    response_field: str = "text"
    max_in_flight: int = 4
    backoff_base: float = 0.5

    def __post_init__(self):
        if self.timeout <= 0:
            raise ConfigError(f"timeout must be > 0, got {self.timeout}")
        if self.max_retries < 0 or self.max_in_flight < 1:
            raise ConfigError("max_retries must be >= 0 and max_in_flight >= 1")


@dataclass
class BackendResult:
    instance: PromptInstance
    answer: str          # "true" / "false" / "unknown"
    failed: bool = False
    error: str | None = None


def _retry_after_seconds(resp) -> float | None:
    value = resp.headers.get("Retry-After")
    if not value:
        return None
    try:
        return float(value)
    except ValueError:
        return None


def _complete_one(backend: CompletionBackend, session, prompt: str) -> str:
    """One prompt -> completion text; raises after exhausting retries."""
    last_error: Exception | None = None
    for attempt in range(backend.max_retries + 1):
        if attempt:
            delay = backend.backoff_base * (2 ** (attempt - 1))
            time.sleep(delay)
        try:
            resp = session.post(
                backend.endpoint,
                json={backend.prompt_field: prompt},
                timeout=backend.timeout,
            )
        except requests.RequestException as exc:
            last_error = exc
            continue
        if resp.status_code in _RETRIABLE:
            retry_after = _retry_after_seconds(resp)
            if retry_after is not None:
                time.sleep(retry_after)
            last_error = RuntimeError(f"HTTP {resp.status_code}")
            continue
        if resp.status_code != 200:
            raise RuntimeError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.text
    raise RuntimeError(f"exhausted {backend.max_retries} retries: {last_error}")


def run_backend(backend: CompletionBackend, instances) -> list[BackendResult]:
    """Post every instance's prompt, parse answers, keep input order.

    Per-instance failures are recorded and the run continues. A response
    that is not JSON or lacks the response field yields an "unknown"
    answer rather than a failure.
    """
    instances = list(instances)
    prompts = [render_prompt(inst, include_answer=False) for inst in instances]

    def work(i: int) -> BackendResult:
        with requests.Session() as session:
            try:
                body = _complete_one(backend, session, prompts[i])
            except Exception as exc:
                log.warning("instance %d failed: %s", i, exc)
                return BackendResult(instances[i], UNKNOWN, failed=True, error=str(exc))
        try:
            payload = json.loads(body)
            text = payload[backend.response_field]
            if not isinstance(text, str):
                raise TypeError("completion field is not a string")
        except Exception as exc:
            log.warning("instance %d: malformed response (%s)", i, exc)
            return BackendResult(instances[i], UNKNOWN)
        return BackendResult(instances[i], parse_answer(text))

    with ThreadPoolExecutor(max_workers=backend.max_in_flight) as pool:
        return list(pool.map(work, range(len(instances))))
