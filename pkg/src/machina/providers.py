"""Completion providers: a deterministic scripted backend for tests and an
OpenAI-compatible HTTP client for real runs, both with call accounting.

Every invocation of ``complete`` counts as exactly one call in the stats,
whatever its outcome; failed HTTP attempts are attempts the bill still
covers.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import requests

from .errors import MachinaError, SchemaError

API_KEY_ENV = "SHERPA_API_KEY"
DEFAULT_TEMPERATURE = 0.01
DEFAULT_MAX_OUTPUT_BYTES = 16384
RETRY_BACKOFF_SECONDS = (0.5, 2.0)


class ProviderError(MachinaError):
    """Base class for completion backend failures."""


class ScriptExhausted(ProviderError):
    def __init__(self):
        super().__init__("scripted provider has no replies left")


class ScriptMismatch(ProviderError):
    def __init__(self, expected: str):
        super().__init__(f"prompt does not contain expected substring {expected!r}")
        self.expected = expected


class HttpError(ProviderError):
    def __init__(self, status: int, body_excerpt: str):
        super().__init__(f"http status {status}: {body_excerpt}")
        self.status = status
        self.body_excerpt = body_excerpt


class Timeout(ProviderError):
    def __init__(self, detail: str = "request timed out"):
        super().__init__(detail)


@dataclass
class CompletionRequest:
    prompt: str
    system: str | None = None
    temperature: float = DEFAULT_TEMPERATURE
    max_output_bytes: int = DEFAULT_MAX_OUTPUT_BYTES

    def __post_init__(self) -> None:
        if not 0 <= self.temperature <= 2:
            raise MachinaError(f"temperature must be within [0, 2], got {self.temperature}")
        if self.max_output_bytes < 1:
            raise MachinaError("max_output_bytes must be positive")


@dataclass
class CallStats:
    calls: int = 0
    prompt_bytes: int = 0
    reply_bytes: int = 0

    def snapshot(self) -> "CallStats":
        return replace(self)


class CompletionProvider(Protocol):
    def complete(self, request: CompletionRequest) -> str: ...

    def snapshot_stats(self) -> CallStats: ...


def _clip_to_bytes(text: str, max_bytes: int) -> str:
    encoded = text.encode("utf-8")
    if len(encoded) <= max_bytes:
        return text
    return encoded[:max_bytes].decode("utf-8", errors="ignore")


@dataclass(frozen=True)
class ScriptStep:
    reply: str
    match: str | None = None


class ScriptedProvider:
    """Replays a fixed list of replies in order.

    In strict mode a step that declares ``match`` requires the prompt to
    contain that substring, which pins down prompt plumbing in tests.
    Replay order matters, so one instance serves one agent at a time.
    """

    def __init__(self, steps: Sequence[ScriptStep], strict: bool = False):
        self.steps = list(steps)
        self.strict = strict
        self._cursor = 0
        self._stats = CallStats()

    @classmethod
    def from_replies(cls, replies: Sequence[str], strict: bool = False) -> "ScriptedProvider":
        return cls([ScriptStep(reply=r) for r in replies], strict=strict)

    @property
    def exhausted(self) -> bool:
        return self._cursor >= len(self.steps)

    def complete(self, request: CompletionRequest) -> str:
        self._stats.calls += 1
        self._stats.prompt_bytes += len(request.prompt.encode("utf-8"))
        if request.system:
            self._stats.prompt_bytes += len(request.system.encode("utf-8"))
        if self._cursor >= len(self.steps):
            raise ScriptExhausted()
        step = self.steps[self._cursor]
        self._cursor += 1
        if self.strict and step.match is not None and step.match not in request.prompt:
            raise ScriptMismatch(step.match)
        reply = _clip_to_bytes(step.reply, request.max_output_bytes)
        self._stats.reply_bytes += len(reply.encode("utf-8"))
        return reply

    def snapshot_stats(self) -> CallStats:
        return self._stats.snapshot()


def load_script(path: str | Path) -> ScriptedProvider:
    """Load a scripted provider from a JSON file:
    ``{"strict": bool?, "steps": [{"reply": str, "match": str?}, ...]}``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError("", f"script is not valid JSON: {exc.msg}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("steps"), list):
        raise SchemaError("/steps", "script needs a 'steps' array")
    steps = []
    for i, raw in enumerate(doc["steps"]):
        if not isinstance(raw, dict) or not isinstance(raw.get("reply"), str):
            raise SchemaError(f"/steps/{i}", "step needs a string 'reply'")
        match = raw.get("match")
        if match is not None and not isinstance(match, str):
            raise SchemaError(f"/steps/{i}/match", "match must be a string")
        unknown = set(raw) - {"reply", "match"}
        if unknown:
            raise SchemaError(f"/steps/{i}", f"unknown keys: {sorted(unknown)}")
        steps.append(ScriptStep(reply=raw["reply"], match=match))
    strict = doc.get("strict", False)
    if not isinstance(strict, bool):
        raise SchemaError("/strict", "strict must be a boolean")
    unknown = set(doc) - {"steps", "strict"}
    if unknown:
        raise SchemaError("", f"unknown keys: {sorted(unknown)}")
    return ScriptedProvider(steps, strict=strict)


class HttpProvider:
    """OpenAI-compatible ``POST {base_url}/chat/completions`` client.

    Authenticates with a bearer token from ``SHERPA_API_KEY`` unless an
    explicit key is given. Retries twice on 429 and 5xx responses with
    exponential backoff (0.5s then 2s); other 4xx responses fail
    immediately. Each HTTP attempt counts as one provider call.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 30.0,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self._session = session or requests.Session()
        self._sleep = sleep
        self._stats = CallStats()

    def _messages(self, request: CompletionRequest) -> list[dict]:
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        messages.append({"role": "user", "content": request.prompt})
        return messages

    def complete(self, request: CompletionRequest) -> str:
        body = {
            "model": self.model,
            "messages": self._messages(request),
            "temperature": request.temperature,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        attempts = 1 + len(RETRY_BACKOFF_SECONDS)
        for attempt in range(attempts):
            self._stats.calls += 1
            self._stats.prompt_bytes += len(request.prompt.encode("utf-8"))
            if request.system:
                self._stats.prompt_bytes += len(request.system.encode("utf-8"))
            try:
                response = self._session.post(
                    f"{self.base_url}/chat/completions",
                    json=body,
                    headers=headers,
                    timeout=self.timeout,
                )
            except requests.Timeout:
                raise Timeout() from None
            except requests.RequestException as exc:
                raise HttpError(0, str(exc)[:200]) from None

            if response.status_code == 429 or response.status_code >= 500:
                if attempt < attempts - 1:
                    self._sleep(RETRY_BACKOFF_SECONDS[attempt])
                    continue
                raise HttpError(response.status_code, response.text[:200])
            if response.status_code != 200:
                raise HttpError(response.status_code, response.text[:200])

            try:
                content = response.json()["choices"][0]["message"]["content"]
            except (ValueError, LookupError, TypeError):
                raise HttpError(response.status_code, "malformed completion body") from None
            if not isinstance(content, str):
                raise HttpError(response.status_code, "completion content is not text")
            reply = _clip_to_bytes(content, request.max_output_bytes)
            self._stats.reply_bytes += len(reply.encode("utf-8"))
            return reply
        raise HttpError(0, "unreachable")  # loop always returns or raises

    def snapshot_stats(self) -> CallStats:
        return self._stats.snapshot()


def snapshot_stats(provider: CompletionProvider) -> CallStats:
    """Copy of the provider's monotone call counters."""
    return provider.snapshot_stats()
