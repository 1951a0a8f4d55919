"""Text-generation backends: an OpenAI-compatible HTTP client and a scripted mock.

Both share :class:`Backend.generate`, which owns retries, the concurrency
limit and billed-token accounting. Subclasses only implement ``_send``.
"""

from __future__ import annotations

import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, Union

import httpx

from .errors import (
    GatewayError,
    ProtocolError,
    RequestError,
    ScriptExhaustedError,
    TransportError,
)

log = logging.getLogger(__name__)

DEFAULT_HARD_CUTOFF = 8192
RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})
ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class GenerationRequest:
    model: str
    messages: tuple[Message, ...]
    max_tokens: int | None = DEFAULT_HARD_CUTOFF
    temperature: float | None = None
    request_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("a generation request needs at least one message")
        if self.max_tokens is not None and self.max_tokens < 1:
            raise ValueError("max_tokens must be at least 1")
        if self.temperature is not None and self.temperature < 0:
            raise ValueError("temperature must be nonnegative")

    @classmethod
    def user(cls, model: str, prompt: str, **kwargs) -> "GenerationRequest":
        return cls(model, (Message("user", prompt),), **kwargs)

    @property
    def prompt(self) -> str:
        return "\n\n".join(m.content for m in self.messages)

    def to_wire(self) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
        }
        if self.max_tokens is not None:
            body["max_tokens"] = self.max_tokens
        if self.temperature is not None:
            body["temperature"] = self.temperature
        return body


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    completion_tokens: int
    reasoning_tokens: int = 0
    finish_reason: str = "stop"
    attempts: int = 1
    latency_s: float | None = None

    @property
    def billed_tokens(self) -> int:
        return self.completion_tokens

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "completion_tokens": self.completion_tokens,
            "reasoning_tokens": self.reasoning_tokens,
            "finish_reason": self.finish_reason,
            "attempts": self.attempts,
            "latency_s": self.latency_s,
        }


class RetryableError(GatewayError):
    """Raised by ``_send`` for failures worth retrying (429, 5xx, timeouts)."""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 1.0
    factor: float = 2.0
    jitter: float = 0.2

    def delay(self, attempt: int, rng: random.Random) -> float:
        d = self.base_delay * self.factor ** (attempt - 1)
        return d * (1.0 + rng.uniform(-self.jitter, self.jitter))


class Backend:
    """Common retry loop, concurrency gate and token ledger."""

    def __init__(
        self,
        retry: RetryPolicy | None = None,
        concurrency: int = 4,
        sleep: Callable[[float], None] = time.sleep,
        seed: int | None = None,
    ):
        self.retry = retry or RetryPolicy()
        self._sleep = sleep
        self._rng = random.Random(seed)
        self._gate = threading.BoundedSemaphore(max(1, concurrency))
        self._lock = threading.Lock()
        self.billed_tokens = 0
        self.calls = 0
        self.last_attempts = 0

    def _send(self, request: GenerationRequest) -> GenerationResponse:
        raise NotImplementedError

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._gate:
            attempt = 0
            start = time.perf_counter()
            while True:
                attempt += 1
                try:
                    response = self._send(request)
                    break
                except RetryableError as exc:
                    if attempt >= self.retry.max_attempts:
                        raise TransportError(f"gave up after {attempt} attempts: {exc}") from exc
                    with self._lock:
                        wait = self.retry.delay(attempt, self._rng)
                    log.warning("request %s attempt %d failed (%s); retrying in %.2fs", request.request_id, attempt, exc, wait)
                    self._sleep(wait)
            if response.latency_s is None:
                response = replace(response, latency_s=time.perf_counter() - start)
            response = replace(response, attempts=attempt)
        with self._lock:
            self.billed_tokens += response.completion_tokens
            self.calls += 1
            self.last_attempts = attempt
        return response

    def close(self):
        pass


class OpenAICompatibleBackend(Backend):
    """POST ``{base_url}/chat/completions`` with a bearer token."""

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        api_key_env: str | None = "OPENAI_API_KEY",
        timeout_seconds: float = 600.0,
        client: httpx.Client | None = None,
        **kwargs,
    ):
        super().__init__(**kwargs)
        self.base_url = base_url.rstrip("/")
        if api_key is None and api_key_env:
            api_key = os.environ.get(api_key_env)
        self._api_key = api_key
        self._client = client or httpx.Client(timeout=timeout_seconds)

    def __repr__(self):
        return f"OpenAICompatibleBackend(base_url={self.base_url!r})"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        return headers

    def _send(self, request: GenerationRequest) -> GenerationResponse:
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=request.to_wire(), headers=self._headers())
        except httpx.TimeoutException as exc:
            raise RetryableError(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise RetryableError(f"transport failure: {exc}") from exc
        if resp.status_code in RETRYABLE_STATUS:
            raise RetryableError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise RequestError(f"HTTP {resp.status_code}: {resp.text[:200]}", status=resp.status_code)
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"response is not JSON: {resp.text[:200]!r}") from exc
        return parse_chat_completion(body)

    def close(self):
        self._client.close()


_FINISH = {"stop": "stop", "length": "length", "eos": "stop", "end_turn": "stop", "max_tokens": "length"}


def parse_chat_completion(body: dict) -> GenerationResponse:
    try:
        choice = body["choices"][0]
        text = choice["message"]["content"]
        usage = body.get("usage") or {}
        completion = int(usage.get("completion_tokens", 0))
        details = usage.get("completion_tokens_details") or {}
        reasoning = int(details.get("reasoning_tokens") or 0)
        finish = _FINISH.get(choice.get("finish_reason") or "stop", "error")
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed chat completion: {exc!r}") from exc
    if text is None:
        text = ""
    if not isinstance(text, str):
        raise ProtocolError("message content is not a string")
    return GenerationResponse(text, completion, reasoning, finish)


Matcher = Union[str, int, Callable[[GenerationRequest], bool], None]


@dataclass
class ScriptRule:
    """One scripted reply.

    ``matcher`` is a prompt substring, a 0-based call position, a predicate on
    the request, or ``None`` to serve in sequence. ``fail`` > 0 makes the
    rule raise a retryable failure that many times before answering.
    """

    response: str
    tokens: int | None = None
    matcher: Matcher = None
    repeat: bool = False
    fail: int = 0
    reasoning_tokens: int = 0
    finish_reason: str = "stop"
    latency_s: float = 0.0
    used: bool = field(default=False, compare=False)

    @classmethod
    def from_dict(cls, data: dict) -> "ScriptRule":
        matcher = data.get("contains", data.get("position"))
        return cls(
            response=data["response"],
            tokens=data.get("tokens"),
            matcher=matcher,
            repeat=bool(data.get("repeat", False)),
            fail=int(data.get("fail", 0)),
            reasoning_tokens=int(data.get("reasoning_tokens", 0)),
        )

    def matches(self, request: GenerationRequest, position: int) -> bool:
        m = self.matcher
        if m is None:
            return False
        if isinstance(m, bool):
            return m
        if isinstance(m, int):
            return m == position
        if isinstance(m, str):
            return m in request.prompt
        return bool(m(request))

    @property
    def billed(self) -> int:
        return self.tokens if self.tokens is not None else len(self.response.split())


class MockBackend(Backend):
    """Deterministic scripted backend that records every prompt it sees."""

    def __init__(self, script: Sequence[ScriptRule | dict], **kwargs):
        kwargs.setdefault("sleep", lambda _s: None)
        kwargs.setdefault("seed", 0)
        super().__init__(**kwargs)
        rules = [r if isinstance(r, ScriptRule) else ScriptRule.from_dict(r) for r in script]
        if not rules:
            raise ValueError("mock script must not be empty")
        self._rules = [replace(r) for r in rules]
        self._failures: dict[int, int] = {}
        self._position = 0
        self.transcript: list[tuple[str, str]] = []
        self.requests: list[GenerationRequest] = []

    @property
    def prompts(self) -> list[str]:
        return [p for p, _ in self.transcript]

    def _pick(self, request: GenerationRequest) -> int:
        live = [k for k, r in enumerate(self._rules) if r.repeat or not r.used]
        for k in live:
            if self._rules[k].matches(request, self._position):
                return k
        for k in live:
            if self._rules[k].matcher is None:
                return k
        raise ScriptExhaustedError(f"no scripted response left for request {request.request_id!r} (call {self._position})")

    def _send(self, request: GenerationRequest) -> GenerationResponse:
        with self._lock:
            k = self._pick(request)
            rule = self._rules[k]
            failed = self._failures.get(k, 0)
            if failed < rule.fail:
                self._failures[k] = failed + 1
                raise RetryableError(f"scripted failure {failed + 1}/{rule.fail}")
            self._failures.pop(k, None)
            self._position += 1
            if not rule.repeat:
                rule.used = True
            self.transcript.append((request.prompt, rule.response))
            self.requests.append(request)
        finish = rule.finish_reason
        tokens = rule.billed
        text = rule.response
        if request.max_tokens is not None and tokens > request.max_tokens:
            tokens = request.max_tokens
            finish = "length"
        return GenerationResponse(text, tokens, rule.reasoning_tokens, finish, latency_s=rule.latency_s)


def mock_script(responses: Sequence[tuple | dict | ScriptRule], **kwargs) -> MockBackend:
    """Build a :class:`MockBackend` from ``(matcher, response[, tokens])`` tuples."""
    rules = []
    for item in responses:
        if isinstance(item, tuple):
            matcher, response, *rest = item
            rules.append(ScriptRule(response, rest[0] if rest else None, matcher))
        else:
            rules.append(item)
    return MockBackend(rules, **kwargs)


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "openai"
    model: str = "default"
    base_url: str = "http://localhost:8000/v1"
    api_key_env: str | None = "OPENAI_API_KEY"
    timeout_seconds: float = 600.0
    max_attempts: int = 5
    concurrency: int = 4
    temperature: float | None = None
    script: tuple = ()

    @classmethod
    def from_dict(cls, data: dict | None) -> "BackendConfig":
        data = dict(data or {})
        data["script"] = tuple(data.get("script", ()))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**data)

    def build(self) -> Backend:
        retry = RetryPolicy(max_attempts=self.max_attempts)
        if self.kind == "mock":
            return MockBackend(list(self.script), retry=retry, concurrency=self.concurrency)
        if self.kind == "openai":
            return OpenAICompatibleBackend(
                self.base_url,
                api_key_env=self.api_key_env,
                timeout_seconds=self.timeout_seconds,
                retry=retry,
                concurrency=self.concurrency,
            )
        raise ValueError(f"unknown backend kind {self.kind!r}")
