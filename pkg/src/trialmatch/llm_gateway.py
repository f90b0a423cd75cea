"""Chat-completion client: prompt assembly, retries, transcripts, replay.

The transport is pluggable so the whole pipeline runs offline: a live HTTP
transport speaks the JSON chat-completions wire format, and a replay
transport serves recorded transcripts keyed by a hash of the messages.
Credentials come from environment variables only (never config files):

    TRIALMATCH_LLM_ENDPOINT   chat-completions URL
    TRIALMATCH_LLM_API_KEY    bearer credential
    TRIALMATCH_LLM_MODEL      model / deployment name
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass, field

from .errors import AuthError, ContextOverflow, ReplayMiss, TransportError

ROLES = ("system", "user", "assistant")

ENV_ENDPOINT = "TRIALMATCH_LLM_ENDPOINT"
ENV_API_KEY = "TRIALMATCH_LLM_API_KEY"
ENV_MODEL = "TRIALMATCH_LLM_MODEL"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if not self.content:
            raise ValueError("message content must be non-empty")


@dataclass
class PromptBundle:
    """Everything needed to assemble one structuring prompt."""

    system_message: str
    instructions: str
    demonstrations: list[tuple[str, str]] = field(default_factory=list)
    user_input: str = ""

    def __post_init__(self):
        if len(self.demonstrations) > 3:
            raise ValueError("at most 3 demonstrations are supported")


@dataclass
class CompletionConfig:
    model_name: str = "gpt-4"
    endpoint: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 1024
    context_token_limit: int = 8192

    def __post_init__(self):
        if self.context_token_limit <= 0:
            raise ValueError("context_token_limit must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def assemble_messages(bundle: PromptBundle) -> list[ChatMessage]:
    """Build the two-message prompt: system (persona + instructions +
    demonstration blocks) and user (the input trial awaiting its output)."""
    parts = [bundle.system_message, "---", bundle.instructions]
    for demo_input, demo_output in bundle.demonstrations:
        parts.append("---")
        parts.append(f"Input:\n\n{demo_input}\n\nEligibility Criteria Output:\n{demo_output}")
    user = f"Input:\n{bundle.user_input}\n\nEligibility Criteria Output:"
    return [
        ChatMessage("system", "\n\n".join(parts)),
        ChatMessage("user", user),
    ]


def estimate_tokens(text: str) -> int:
    """Deterministic upper-bound token estimate used only for pre-flight guards."""
    return math.ceil(len(text) / 3)


def request_hash(messages: list[ChatMessage]) -> str:
    canonical = json.dumps(
        [{"role": m.role, "content": m.content} for m in messages],
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------

class HttpTransport:
    """Live JSON chat-completions transport over httpx."""

    def __init__(self, endpoint: str, api_key: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout

    def send(self, payload: dict) -> str:
        import httpx

        try:
            response = httpx.post(
                self.endpoint,
                json=payload,
                headers={"Authorization": f"Bearer {self.api_key}", "api-key": self.api_key},
                timeout=self.timeout,
            )
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if response.status_code in (401, 403):
            raise AuthError(f"credentials rejected: HTTP {response.status_code}")
        if response.status_code >= 400:
            raise TransportError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise TransportError(f"malformed completion response: {exc}") from exc


class ReplayTransport:
    """Serves recorded responses; never touches the network."""

    def __init__(self, transcript_path):
        self.responses: dict[str, str] = {}
        with open(transcript_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entry = json.loads(line)
                    self.responses[entry["request_hash"]] = entry["response"]

    def send(self, payload: dict) -> str:
        messages = [ChatMessage(m["role"], m["content"]) for m in payload["messages"]]
        key = request_hash(messages)
        if key not in self.responses:
            raise ReplayMiss(f"no transcript entry for request {key[:12]}…")
        return self.responses[key]


class TranscriptRecorder:
    """Append-only JSONL transcript writer; appends are serialized."""

    def __init__(self, path):
        self.path = path
        self._lock = threading.Lock()

    def record(self, messages: list[ChatMessage], response: str) -> None:
        entry = {
            "request_hash": request_hash(messages),
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "response": response,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")


class RateLimiter:
    """Token bucket serializing request admission across threads."""

    def __init__(self, rate_per_minute: float = 60.0, capacity: float | None = None):
        self.rate = rate_per_minute / 60.0
        self.capacity = capacity if capacity is not None else max(1.0, rate_per_minute / 6.0)
        self._tokens = self.capacity
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------

class ChatClient:
    """Shareable completion client with pre-flight guard, retry, recording."""

    def __init__(
        self,
        transport,
        config: CompletionConfig,
        recorder: TranscriptRecorder | None = None,
        rate_limiter: RateLimiter | None = None,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        sleep=time.sleep,
    ):
        self.transport = transport
        self.config = config
        self.recorder = recorder
        self.rate_limiter = rate_limiter
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._sleep = sleep

    def complete(self, messages: list[ChatMessage]) -> str:
        """Run one completion; raises ContextOverflow before any transport call."""
        prompt_tokens = sum(estimate_tokens(m.content) for m in messages)
        budget = prompt_tokens + self.config.max_output_tokens
        if budget > self.config.context_token_limit:
            raise ContextOverflow(
                f"estimated {prompt_tokens} prompt tokens + "
                f"{self.config.max_output_tokens} output tokens exceed the "
                f"{self.config.context_token_limit}-token context limit"
            )
        payload = {
            "model": self.config.model_name,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        }
        last_error: TransportError | None = None
        for attempt in range(1, self.max_attempts + 1):
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            try:
                response = self.transport.send(payload)
                break
            except AuthError:
                raise
            except TransportError as exc:
                last_error = exc
                if attempt == self.max_attempts:
                    raise
                self._sleep(self.backoff_base * 2 ** (attempt - 1))
        else:  # pragma: no cover - loop always breaks or raises
            raise last_error
        if self.recorder is not None:
            self.recorder.record(messages, response)
        return response


def complete(messages: list[ChatMessage], config: CompletionConfig, transport=None, **kwargs) -> str:
    """One-shot completion using the given (or env-configured) transport."""
    if transport is None:
        transport = transport_from_env(config)
    return ChatClient(transport, config, **kwargs).complete(messages)


def transport_from_env(config: CompletionConfig) -> HttpTransport:
    endpoint = config.endpoint or os.environ.get(ENV_ENDPOINT, "")
    api_key = os.environ.get(ENV_API_KEY, "")
    if not endpoint:
        raise TransportError(f"no endpoint configured; set {ENV_ENDPOINT}")
    if not api_key:
        raise AuthError(f"no API key configured; set {ENV_API_KEY}")
    return HttpTransport(endpoint, api_key)
