"""Chat-completion client with an offline deterministic mock backend.

The HTTP backend posts a chat-completions-style JSON body (model name, one
user message, temperature 0) to the configured endpoint, reading the API key
from the ``HISEKT_LLM_API_KEY`` environment variable.  The mock backend
answers scoring and prediction prompts locally by parsing the prompt text and
computing the reference formulas, so CI and reruns need no network and are
byte-identical.
"""

from __future__ import annotations

import json
import logging
import os
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Mapping

from .errors import TransportError

logger = logging.getLogger(__name__)

API_KEY_ENV = "HISEKT_LLM_API_KEY"
DEFAULT_MAX_IN_FLIGHT = 8
BACKOFF_BASE_SECONDS = 0.5


class MockTransport:
    """Answers prompts offline by recomputing the deterministic reference logic."""

    def __call__(self, prompt: str) -> str:
        # local imports: llm is a dependency of both prompt-owning modules
        from .pathscore import is_scoring_prompt, mock_score_reply
        from .predict import is_prediction_prompt, mock_prediction_reply

        if is_scoring_prompt(prompt):
            return mock_score_reply(prompt)
        if is_prediction_prompt(prompt):
            return mock_prediction_reply(prompt)
        raise TransportError("mock transport cannot answer this prompt")


@dataclass
class LlmClient:
    """Configuration plus transport for one LLM backend."""

    endpoint: str = ""
    model_name: str = "mock"
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT
    backend: str = "mock"
    transport: Callable[[str], str] | None = None

    def __post_init__(self):
        if self.backend not in ("http", "mock"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "mock" and self.transport is None:
            self.transport = MockTransport()

    def complete(self, prompt: str) -> str:
        """Single completion round trip; transport errors retry with backoff."""
        if self.backend == "mock":
            return self.transport(prompt)
        last_error: Exception | None = None
        for attempt in range(max(self.max_retries, 1)):
            try:
                return self._http_complete(prompt)
            except TransportError as exc:
                last_error = exc
                time.sleep(BACKOFF_BASE_SECONDS * 2**attempt)
        raise TransportError(f"llm endpoint unreachable after retries: {last_error}")

    def _http_complete(self, prompt: str) -> str:
        body = json.dumps(
            {
                "model": self.model_name,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": 0,
            }
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        request = urllib.request.Request(self.endpoint, data=body, headers=headers)
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                payload = json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
            raise TransportError(f"request to {self.endpoint} failed: {exc}") from exc
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response shape: {payload!r}") from exc


def scripted_client(replies: Iterable[str], **kwargs) -> LlmClient:
    """Mock client that plays back canned replies in order (test helper)."""
    queue = list(replies)

    def transport(prompt: str) -> str:
        del prompt
        if not queue:
            raise TransportError("scripted client exhausted")
        return queue.pop(0)

    return LlmClient(backend="mock", transport=transport, **kwargs)


def map_bounded(
    fn: Callable,
    items: Mapping[Hashable, object] | Iterable[tuple[Hashable, object]],
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
) -> dict:
    """Apply ``fn`` to keyed items under a bounded worker pool; results keyed, order-free."""
    pairs = list(items.items()) if isinstance(items, Mapping) else list(items)
    if max_in_flight <= 1 or len(pairs) <= 1:
        return {key: fn(value) for key, value in pairs}
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        futures = {key: pool.submit(fn, value) for key, value in pairs}
        return {key: fut.result() for key, fut in futures.items()}
