"""Completion backends: scripted mock, HTTP chat endpoint, role routing.

Every model call in the engine goes through a :class:`Backend`.  The
mock replays scripted replies deterministically for a given (script,
seed) pair, which is what the test suite and offline pipelines run on.
The HTTP backend speaks the common chat-completions wire shape with
bounded retries.  A :class:`BackendHub` binds each role (solver,
annotator, verifier) to exactly one backend.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import httpx

from .tokens import TOKENIZER_NAME, approx_token_count

logger = logging.getLogger(__name__)

VERIFIER_DEFAULT_SAMPLES = 4
VERIFIER_DEFAULT_TEMPERATURE = 0.8


class BackendError(Exception):
    """Base for completion failures."""


class TransportError(BackendError):
    """Connection-level failure; retryable."""


class ProtocolError(BackendError):
    """The peer answered, but not with a usable completion."""


class BackendConfigError(BackendError):
    """Backend wiring is wrong (missing credentials, unknown role)."""


class BackendRole(str, Enum):
    SOLVER = "solver"
    ANNOTATOR = "annotator"
    VERIFIER = "verifier"


@dataclass(frozen=True, slots=True)
class CompletionRequest:
    prompt: str
    max_new_tokens: int = 1024
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True, slots=True)
class CompletionResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency: float = 0.0
    token_source: str = TOKENIZER_NAME


@dataclass(frozen=True, slots=True)
class SampleOutcome:
    """One entry of a sample_n call: a response or a per-sample error."""

    response: CompletionResponse | None = None
    error: BackendError | None = None

    @property
    def ok(self) -> bool:
        return self.response is not None


def apply_stop_sequences(text: str, stops: Sequence[str]) -> str:
    """Cut text before the earliest stop sequence occurrence."""
    cut = len(text)
    for stop in stops:
        if not stop:
            continue
        at = text.find(stop)
        if at != -1:
            cut = min(cut, at)
    return text[:cut]


class Backend:
    """One completion endpoint."""

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        return self._complete_variant(request, 0)

    def sample_n(self, request: CompletionRequest, n: int) -> list[SampleOutcome]:
        """n independent samples; failures become per-sample entries."""
        if n < 1:
            raise ValueError("sample count must be >= 1")
        outcomes: list[SampleOutcome] = []
        for variant in range(n):
            try:
                outcomes.append(SampleOutcome(response=self._complete_variant(request, variant)))
            except BackendConfigError:
                raise
            except BackendError as exc:
                outcomes.append(SampleOutcome(error=exc))
        return outcomes

    def _complete_variant(self, request: CompletionRequest, variant: int) -> CompletionResponse:
        raise NotImplementedError


@dataclass(frozen=True, slots=True)
class MockRule:
    """One scripted reply.

    A rule applies when `match` occurs in the prompt (empty matches
    everything), or when `prompt_hash` equals the prompt's sha256.  An
    `error` rule simulates a transport failure instead of replying.
    """

    match: str = ""
    prompt_hash: str | None = None
    reply: str = ""
    tokens: int | None = None
    latency: float = 0.0
    error: str | None = None

    def applies_to(self, prompt: str) -> bool:
        if self.prompt_hash is not None:
            return hashlib.sha256(prompt.encode("utf-8")).hexdigest() == self.prompt_hash
        return self.match in prompt


def mock_rules_from_jsonl(text: str) -> list[MockRule]:
    """Parse a mock script: one JSON object per line.

    Fields: match (or hash), reply, and optional tokens, latency, error.
    """
    rules: list[MockRule] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BackendConfigError(f"mock script line {lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise BackendConfigError(f"mock script line {lineno}: expected an object")
        rules.append(
            MockRule(
                match=obj.get("match", ""),
                prompt_hash=obj.get("hash"),
                reply=obj.get("reply", ""),
                tokens=obj.get("tokens"),
                latency=float(obj.get("latency", 0.0)),
                error=obj.get("error"),
            )
        )
    return rules


class MockBackend(Backend):
    """Deterministic scripted backend.

    For a prompt, the applicable rules form an ordered pool; the k-th
    sample of a call picks pool[(seed + k) % len(pool)].  Identical
    (script, seed, request) always yields identical bytes.  max_new_tokens
    is not enforced on scripted replies.
    """

    def __init__(self, rules: Sequence[MockRule], seed: int = 0) -> None:
        self._rules = list(rules)
        self._seed = seed

    @classmethod
    def from_script(cls, path: str, seed: int = 0) -> "MockBackend":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(mock_rules_from_jsonl(fh.read()), seed=seed)

    def _complete_variant(self, request: CompletionRequest, variant: int) -> CompletionResponse:
        pool = [r for r in self._rules if r.applies_to(request.prompt)]
        if not pool:
            head = request.prompt[:120].replace("\n", "\\n")
            raise ProtocolError(f"no scripted reply matches prompt starting {head!r}")
        rule = pool[(self._seed + variant) % len(pool)]
        if rule.error is not None:
            raise TransportError(f"scripted failure: {rule.error}")
        text = apply_stop_sequences(rule.reply, request.stop_sequences)
        if rule.tokens is not None:
            completion_tokens = rule.tokens
            source = "reported"
        else:
            completion_tokens = approx_token_count(text)
            source = TOKENIZER_NAME
        return CompletionResponse(
            text=text,
            prompt_tokens=approx_token_count(request.prompt),
            completion_tokens=completion_tokens,
            latency=rule.latency,
            token_source=source,
        )


class HTTPBackend(Backend):
    """Chat-completions endpoint client with bounded retries.

    Retries connection failures, 429, and 5xx responses with exponential
    backoff; total attempts never exceed max_retries + 1.  Other HTTP
    errors and malformed payloads fail immediately.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 2,
        backoff_base: float = 0.5,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self._model = model
        self._max_retries = max_retries
        self._backoff_base = backoff_base
        headers = {}
        if api_key_env:
            key = os.environ.get(api_key_env)
            if not key:
                raise BackendConfigError(f"environment variable {api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"),
            headers=headers,
            timeout=timeout,
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def _complete_variant(self, request: CompletionRequest, variant: int) -> CompletionResponse:
        payload: dict = {
            "model": self._model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)

        attempts = self._max_retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                time.sleep(self._backoff_base * (2 ** (attempt - 1)))
            started = time.monotonic()
            try:
                response = self._client.post("/chat/completions", json=payload)
            except httpx.TransportError as exc:
                last_error = exc
                logger.warning("completion attempt %d failed: %s", attempt + 1, exc)
                continue
            elapsed = time.monotonic() - started
            if response.status_code == 429 or response.status_code >= 500:
                last_error = ProtocolError(f"HTTP {response.status_code}")
                logger.warning("completion attempt %d got HTTP %d", attempt + 1, response.status_code)
                continue
            if response.status_code != 200:
                raise ProtocolError(f"HTTP {response.status_code}: {response.text[:200]}")
            return self._parse_body(response, request, elapsed)
        raise TransportError(f"no completion after {attempts} attempts: {last_error}")

    def _parse_body(
        self, response: httpx.Response, request: CompletionRequest, elapsed: float
    ) -> CompletionResponse:
        try:
            body = response.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion payload: {exc}") from exc
        if not isinstance(text, str):
            raise ProtocolError("completion content is not a string")
        text = apply_stop_sequences(text, request.stop_sequences)
        usage = body.get("usage") or {}
        prompt_tokens = usage.get("prompt_tokens")
        completion_tokens = usage.get("completion_tokens")
        if isinstance(prompt_tokens, int) and isinstance(completion_tokens, int):
            source = "reported"
        else:
            prompt_tokens = approx_token_count(request.prompt)
            completion_tokens = approx_token_count(text)
            source = TOKENIZER_NAME
        return CompletionResponse(
            text=text,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            latency=elapsed,
            token_source=source,
        )


@dataclass
class BackendHub:
    """Role-to-backend binding; every role resolves to exactly one backend."""

    backends: Mapping[BackendRole, Backend] = field(default_factory=dict)

    def backend_for(self, role: BackendRole) -> Backend:
        backend = self.backends.get(role)
        if backend is None:
            raise BackendConfigError(f"no backend configured for role {role.value!r}")
        return backend

    def complete(self, request: CompletionRequest, role: BackendRole) -> CompletionResponse:
        return self.backend_for(role).complete(request)

    def sample_n(self, request: CompletionRequest, role: BackendRole, n: int) -> list[SampleOutcome]:
        return self.backend_for(role).sample_n(request, n)
