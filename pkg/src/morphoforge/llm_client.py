"""Minimal chat-completion client for OpenAI/Mistral-style endpoints.

One POST per completion with `messages=[{role, content}, ...]` bodies.
Both vendor rate limits (requests/min and tokens/min) are enforced with
a 60-second sliding window; transient failures retry with exponential
backoff. Every exchange lands in an append-only transcript keyed by a
stable digest of the canonical message serialization, which the replay
backend uses to reproduce recorded experiments offline, byte for byte.

API keys are read from environment variables only (MORPHOFORGE_OPENAI_KEY,
MORPHOFORGE_MISTRAL_KEY by default), never from files.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass

import requests


class ServiceError(Exception):
    """Base class for endpoint problems (CLI exit code 3)."""


class ConfigError(ServiceError):
    pass


class PermanentError(ServiceError):
    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:500]}")
        self.status = status
        self.body = body


class TransientFailureError(ServiceError):
    pass


class ReplayMissError(ServiceError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    api_key_env: str
    requests_per_minute: int
    tokens_per_minute: int  # thousands of tokens per minute
    timeout: float = 60.0
    temperature: float = 0.0

    def __post_init__(self):
        if self.requests_per_minute <= 0 or self.tokens_per_minute <= 0:
            raise ConfigError("rate limits must be positive")


_OPENAI_URL = "https://api.openai.com/v1/chat/completions"
_MISTRAL_URL = "https://api.mistral.ai/v1/chat/completions"

ENDPOINT_PRESETS = {
    "mistral-medium": EndpointConfig(_MISTRAL_URL, "mistral-medium", "MORPHOFORGE_MISTRAL_KEY", 120, 2000),
    "mistral-small": EndpointConfig(_MISTRAL_URL, "mistral-small", "MORPHOFORGE_MISTRAL_KEY", 120, 2000),
    "mistral-tiny": EndpointConfig(_MISTRAL_URL, "mistral-tiny", "MORPHOFORGE_MISTRAL_KEY", 120, 2000),
    "gpt-3.5-turbo": EndpointConfig(_OPENAI_URL, "gpt-3.5-turbo", "MORPHOFORGE_OPENAI_KEY", 500, 60),
    "gpt-4": EndpointConfig(_OPENAI_URL, "gpt-4", "MORPHOFORGE_OPENAI_KEY", 500, 10),
    "gpt-4-turbo": EndpointConfig(_OPENAI_URL, "gpt-4-turbo", "MORPHOFORGE_OPENAI_KEY", 500, 150),
}


def canonical_messages(prompt) -> list:
    if hasattr(prompt, "messages"):
        return prompt.messages()
    return list(prompt)


def prompt_digest(messages) -> str:
    """Stable sha256 over the canonical JSON form of the messages."""
    canonical = json.dumps(messages, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _estimate_tokens(messages) -> int:
    chars = sum(len(m.get("content", "")) for m in messages)
    return max(1, -(-chars // 4))


@dataclass
class TranscriptEntry:
    digest: str
    messages: list
    response: str
    latency: float
    timestamp: float
    model_name: str = ""

    def to_dict(self) -> dict:
        return {
            "digest": self.digest,
            "messages": self.messages,
            "response": self.response,
            "latency": self.latency,
            "timestamp": self.timestamp,
            "model_name": self.model_name,
        }


class Transcript:
    """Append-only record of request/response exchanges."""

    def __init__(self, entries=None):
        self.entries = list(entries or [])
        self._lock = threading.Lock()

    def append(self, entry: TranscriptEntry) -> None:
        with self._lock:
            self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def by_digest(self) -> dict:
        out = {}
        for e in self.entries:
            if e.digest in out and out[e.digest] != e.response:
                raise ReplayMissError(f"transcript digest {e.digest} maps to conflicting responses")
            out[e.digest] = e.response
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_dict(), ensure_ascii=True) + "\n")

    @classmethod
    def load(cls, path) -> "Transcript":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                entries.append(
                    TranscriptEntry(
                        digest=d["digest"],
                        messages=d["messages"],
                        response=d["response"],
                        latency=d.get("latency", 0.0),
                        timestamp=d.get("timestamp", 0.0),
                        model_name=d.get("model_name", ""),
                    )
                )
        return cls(entries)


class SlidingWindowLimiter:
    """Blocks until both per-minute budgets admit the next request.

    No 60-second window that ends at a grant instant ever contains more
    than requests_per_minute grants or tokens_per_minute tokens.
    """

    WINDOW = 60.0

    def __init__(self, requests_per_minute: int, tokens_per_minute: int, clock=None, sleep=None):
        self.requests_per_minute = requests_per_minute
        self.tokens_per_minute = tokens_per_minute
        self.clock = clock or time.monotonic
        self.sleep = sleep or time.sleep
        self.events = deque()  # (grant time, tokens)

    def _evict(self, now: float) -> None:
        while self.events and self.events[0][0] <= now - self.WINDOW:
            self.events.popleft()

    def acquire(self, tokens: int) -> float:
        """Grant one request of `tokens`; returns the total delay slept."""
        waited = 0.0
        while True:
            now = self.clock()
            self._evict(now)
            token_load = sum(t for _, t in self.events)
            fits_requests = len(self.events) < self.requests_per_minute
            fits_tokens = token_load + tokens <= self.tokens_per_minute or not self.events
            if fits_requests and fits_tokens:
                self.events.append((now, tokens))
                return waited
            # sleep until the oldest event leaves the window
            wait = max(self.events[0][0] + self.WINDOW - now, 1e-3)
            self.sleep(wait)
            waited += wait


class HttpBackend:
    """Live endpoint: one POST per completion, key from the environment."""

    def __init__(self, cfg: EndpointConfig, session=None):
        self.cfg = cfg
        self.session = session or requests.Session()

    def send(self, messages) -> str:
        key = os.environ.get(self.cfg.api_key_env)
        if not key:
            raise ConfigError(
                f"API key environment variable {self.cfg.api_key_env} is not set"
            )
        body = {
            "model": self.cfg.model_name,
            "messages": messages,
            "temperature": self.cfg.temperature,
        }
        try:
            resp = self.session.post(
                self.cfg.base_url,
                json=body,
                headers={"Authorization": f"Bearer {key}"},
                timeout=self.cfg.timeout,
            )
        except requests.RequestException as exc:
            raise TransientFailureError(f"request failed: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientFailureError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise PermanentError(resp.status_code, resp.text)
        data = resp.json()
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise PermanentError(resp.status_code, f"malformed completion body: {resp.text[:200]}") from None


class MockBackend:
    """Canned responses by prompt digest; never touches the network."""

    def __init__(self, responses: dict, default: str | None = None):
        self.responses = dict(responses)
        self.default = default
        self.calls = []

    def send(self, messages) -> str:
        digest = prompt_digest(messages)
        self.calls.append(digest)
        if digest in self.responses:
            return self.responses[digest]
        if self.default is not None:
            return self.default
        raise ReplayMissError(f"no canned response for digest {digest}")


def replay_backend(transcript: Transcript) -> MockBackend:
    """Backend that answers exactly as a recorded transcript did."""
    return MockBackend(transcript.by_digest())


class ChatClient:
    """Rate-limited, retrying completion client over a pluggable backend."""

    MAX_RETRIES = 3

    def __init__(self, cfg: EndpointConfig, backend=None, transcript=None, clock=None, sleep=None):
        self.cfg = cfg
        self.backend = backend if backend is not None else HttpBackend(cfg)
        self.transcript = transcript if transcript is not None else Transcript()
        self.limiter = SlidingWindowLimiter(
            cfg.requests_per_minute, cfg.tokens_per_minute * 1000, clock=clock, sleep=sleep
        )
        self._sleep = sleep or time.sleep
        self._clock = clock or time.monotonic

    def chat_complete(self, prompt) -> str:
        messages = canonical_messages(prompt)
        if not messages:
            raise ConfigError("prompt must contain at least one message")
        digest = prompt_digest(messages)
        self.limiter.acquire(_estimate_tokens(messages))
        started = self._clock()
        attempt = 0
        while True:
            try:
                response = self.backend.send(messages)
                break
            except TransientFailureError:
                if attempt >= self.MAX_RETRIES:
                    raise
                self._sleep(2.0**attempt)
                attempt += 1
        self.transcript.append(
            TranscriptEntry(
                digest=digest,
                messages=messages,
                response=response,
                latency=self._clock() - started,
                timestamp=time.time(),
                model_name=self.cfg.model_name,
            )
        )
        return response


def chat_complete(cfg: EndpointConfig, prompt, backend=None, transcript=None) -> str:
    """One-shot completion; for sustained use keep a ChatClient."""
    return ChatClient(cfg, backend=backend, transcript=transcript).chat_complete(prompt)
