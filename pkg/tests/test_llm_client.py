"""Tests for the chat client: digests, rate limiting, retries, replay."""

import hashlib
import json

import pytest
import requests

from morphoforge.llm_client import (
    ENDPOINT_PRESETS,
    ChatClient,
    ConfigError,
    EndpointConfig,
    HttpBackend,
    MockBackend,
    PermanentError,
    ReplayMissError,
    SlidingWindowLimiter,
    Transcript,
    TranscriptEntry,
    TransientFailureError,
    canonical_messages,
    chat_complete,
    prompt_digest,
    replay_backend,
)


class FakeClock:
    """Monotonic clock plus sleep that advances it; records sleep calls."""

    def __init__(self):
        self.now = 0.0
        self.sleeps = []

    def __call__(self):
        return self.now

    def sleep(self, dt):
        self.sleeps.append(dt)
        self.now += dt


class FakeResponse:
    def __init__(self, status_code, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload
        self.text = text

    def json(self):
        if self._payload is None:
            raise ValueError("no body")
        return self._payload


class FakeSession:
    """Plays back a scripted list of responses (or raises exceptions)."""

    def __init__(self, script):
        self.script = list(script)
        self.posts = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.posts.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        item = self.script.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def _msgs(text="hello"):
    return [{"role": "user", "content": text}]


def _cfg(rpm=1000, tpm=1000, key_env="MORPHOFORGE_OPENAI_KEY"):
    return EndpointConfig("https://example.invalid/v1", "test-model", key_env, rpm, tpm)


# ---------------------------------------------------------------- digests


def test_prompt_digest_matches_sha256_of_canonical_json():
    msgs = _msgs("hello")
    canonical = json.dumps(msgs, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    assert prompt_digest(msgs) == hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def test_prompt_digest_ignores_key_order_but_not_content():
    a = [{"role": "user", "content": "hi"}]
    b = [{"content": "hi", "role": "user"}]
    c = [{"role": "user", "content": "hi!"}]
    assert prompt_digest(a) == prompt_digest(b)
    assert prompt_digest(a) != prompt_digest(c)
    assert len(prompt_digest(a)) == 64


def test_prompt_digest_stable_for_non_ascii():
    msgs = _msgs("café 40 µL")
    assert prompt_digest(msgs) == prompt_digest(json.loads(json.dumps(msgs)))


def test_canonical_messages_accepts_prompt_objects_and_lists():
    class P:
        def messages(self):
            return _msgs("from object")

    assert canonical_messages(P()) == _msgs("from object")
    assert canonical_messages(_msgs("plain")) == _msgs("plain")


# ----------------------------------------------------------- rate limiter


def test_limiter_first_two_requests_pass_third_waits_for_window():
    clock = FakeClock()
    lim = SlidingWindowLimiter(2, 10**9, clock=clock, sleep=clock.sleep)
    assert lim.acquire(10) == 0.0
    clock.now = 1.0
    assert lim.acquire(10) == 0.0
    clock.now = 2.0
    waited = lim.acquire(10)
    # must wait until the t=0 grant leaves the 60 s window
    assert waited == pytest.approx(58.0)
    assert clock.now == pytest.approx(60.0)


def test_limiter_token_budget_forces_wait():
    clock = FakeClock()
    lim = SlidingWindowLimiter(100, 100, clock=clock, sleep=clock.sleep)
    assert lim.acquire(60) == 0.0
    waited = lim.acquire(50)
    assert waited == pytest.approx(60.0)


def test_limiter_oversized_request_allowed_only_in_empty_window():
    clock = FakeClock()
    lim = SlidingWindowLimiter(100, 100, clock=clock, sleep=clock.sleep)
    assert lim.acquire(500) == 0.0  # alone in the window
    waited = lim.acquire(500)
    assert waited == pytest.approx(60.0)


def test_limiter_event_at_window_edge_is_evicted():
    clock = FakeClock()
    lim = SlidingWindowLimiter(1, 10**9, clock=clock, sleep=clock.sleep)
    lim.acquire(1)
    clock.now = 60.0
    assert lim.acquire(1) == 0.0


def test_limiter_window_invariant_under_random_load():
    import numpy as np

    rng = np.random.default_rng(11)
    clock = FakeClock()
    rpm, tpm = 5, 200
    lim = SlidingWindowLimiter(rpm, tpm, clock=clock, sleep=clock.sleep)
    grants = []
    for _ in range(100):
        clock.now += float(rng.uniform(0.0, 20.0))
        tokens = int(rng.integers(1, 81))
        lim.acquire(tokens)
        grants.append((clock.now, tokens))
        # every 60 s window ending at a grant respects both budgets
        t_end = clock.now
        in_window = [(t, k) for t, k in grants if t > t_end - 60.0]
        assert len(in_window) <= rpm
        assert sum(k for _, k in in_window) <= tpm


# ------------------------------------------------------------ transcripts


def _entry(text, response, model="m"):
    msgs = _msgs(text)
    return TranscriptEntry(prompt_digest(msgs), msgs, response, 0.5, 123.0, model)


def test_transcript_save_load_round_trip(tmp_path):
    t = Transcript([_entry("a", "A"), _entry("b", "B")])
    path = tmp_path / "t.jsonl"
    t.save(path)
    back = Transcript.load(path)
    assert [e.to_dict() for e in back.entries] == [e.to_dict() for e in t.entries]


def test_transcript_load_skips_blank_lines(tmp_path):
    path = tmp_path / "t.jsonl"
    t = Transcript([_entry("a", "A")])
    t.save(path)
    path.write_text(path.read_text() + "\n\n", encoding="utf-8")
    assert len(Transcript.load(path)) == 1


def test_transcript_by_digest_and_conflict():
    t = Transcript([_entry("a", "A"), _entry("a", "A")])
    assert len(t.by_digest()) == 1
    bad = Transcript([_entry("a", "A"), _entry("a", "B")])
    with pytest.raises(ReplayMissError):
        bad.by_digest()


# ---------------------------------------------------------- mock backend


def test_mock_backend_returns_canned_response_and_records_calls():
    msgs = _msgs("q")
    backend = MockBackend({prompt_digest(msgs): "canned"})
    assert backend.send(msgs) == "canned"
    assert backend.calls == [prompt_digest(msgs)]


def test_mock_backend_default_and_miss():
    backend = MockBackend({}, default="fallback")
    assert backend.send(_msgs("anything")) == "fallback"
    strict = MockBackend({})
    with pytest.raises(ReplayMissError):
        strict.send(_msgs("unknown"))


def test_replay_backend_answers_like_the_recording():
    clock = FakeClock()
    live = MockBackend({}, default="Answer: 'Cube'")
    client = ChatClient(_cfg(), backend=live, clock=clock, sleep=clock.sleep)
    for text in ("p1", "p2"):
        client.chat_complete(_msgs(text))
    replay = replay_backend(client.transcript)
    assert replay.send(_msgs("p1")) == "Answer: 'Cube'"
    with pytest.raises(ReplayMissError):
        replay.send(_msgs("never recorded"))


# ------------------------------------------------------------ chat client


def test_chat_client_records_transcript_entry():
    clock = FakeClock()
    backend = MockBackend({}, default="ok")
    client = ChatClient(_cfg(), backend=backend, clock=clock, sleep=clock.sleep)
    out = client.chat_complete(_msgs("hello"))
    assert out == "ok"
    assert len(client.transcript) == 1
    entry = client.transcript.entries[0]
    assert entry.digest == prompt_digest(_msgs("hello"))
    assert entry.response == "ok"
    assert entry.model_name == "test-model"
    assert entry.timestamp > 0


class FlakyBackend:
    def __init__(self, failures, response="ok"):
        self.failures = failures
        self.response = response
        self.calls = 0

    def send(self, messages):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransientFailureError("boom")
        return self.response


def test_retry_backoff_doubles_then_succeeds():
    clock = FakeClock()
    backend = FlakyBackend(3)
    client = ChatClient(_cfg(), backend=backend, clock=clock, sleep=clock.sleep)
    assert client.chat_complete(_msgs()) == "ok"
    assert backend.calls == 4
    assert clock.sleeps == [1.0, 2.0, 4.0]
    assert client.transcript.entries[0].latency == pytest.approx(7.0)


def test_retry_gives_up_after_max_retries():
    clock = FakeClock()
    backend = FlakyBackend(10)
    client = ChatClient(_cfg(), backend=backend, clock=clock, sleep=clock.sleep)
    with pytest.raises(TransientFailureError):
        client.chat_complete(_msgs())
    assert backend.calls == 1 + ChatClient.MAX_RETRIES
    assert len(client.transcript) == 0


def test_permanent_error_is_not_retried():
    class Bad:
        def __init__(self):
            self.calls = 0

        def send(self, messages):
            self.calls += 1
            raise PermanentError(400, "bad request")

    clock = FakeClock()
    backend = Bad()
    client = ChatClient(_cfg(), backend=backend, clock=clock, sleep=clock.sleep)
    with pytest.raises(PermanentError):
        client.chat_complete(_msgs())
    assert backend.calls == 1


def test_empty_prompt_rejected():
    client = ChatClient(_cfg(), backend=MockBackend({}, default="x"))
    with pytest.raises(ConfigError):
        client.chat_complete([])


def test_client_token_budget_is_thousands():
    client = ChatClient(_cfg(tpm=60), backend=MockBackend({}, default="x"))
    assert client.limiter.tokens_per_minute == 60_000


def test_one_shot_helper_uses_backend_and_transcript():
    transcript = Transcript()
    out = chat_complete(_cfg(), _msgs("hi"), backend=MockBackend({}, default="y"), transcript=transcript)
    assert out == "y"
    assert len(transcript) == 1


# ------------------------------------------------------------ http backend


def test_http_backend_requires_env_key(monkeypatch):
    monkeypatch.delenv("MORPHOFORGE_OPENAI_KEY", raising=False)
    backend = HttpBackend(_cfg())
    with pytest.raises(ConfigError):
        backend.send(_msgs())


def test_http_backend_posts_body_and_bearer_header(monkeypatch):
    monkeypatch.setenv("MORPHOFORGE_OPENAI_KEY", "sk-test")
    payload = {"choices": [{"message": {"content": "fine"}}]}
    session = FakeSession([FakeResponse(200, payload)])
    backend = HttpBackend(_cfg(), session=session)
    assert backend.send(_msgs("q")) == "fine"
    post = session.posts[0]
    assert post["url"] == "https://example.invalid/v1"
    assert post["json"]["model"] == "test-model"
    assert post["json"]["messages"] == _msgs("q")
    assert post["json"]["temperature"] == 0.0
    assert post["headers"]["Authorization"] == "Bearer sk-test"
    assert post["timeout"] == 60.0


def test_http_backend_status_mapping(monkeypatch):
    monkeypatch.setenv("MORPHOFORGE_OPENAI_KEY", "sk-test")
    for status, exc in ((429, TransientFailureError), (503, TransientFailureError), (401, PermanentError)):
        backend = HttpBackend(_cfg(), session=FakeSession([FakeResponse(status, text="nope")]))
        with pytest.raises(exc):
            backend.send(_msgs())


def test_http_backend_network_error_is_transient(monkeypatch):
    monkeypatch.setenv("MORPHOFORGE_OPENAI_KEY", "sk-test")
    backend = HttpBackend(_cfg(), session=FakeSession([requests.ConnectionError("down")]))
    with pytest.raises(TransientFailureError):
        backend.send(_msgs())


def test_http_backend_malformed_completion_body(monkeypatch):
    monkeypatch.setenv("MORPHOFORGE_OPENAI_KEY", "sk-test")
    backend = HttpBackend(_cfg(), session=FakeSession([FakeResponse(200, {"choices": []})]))
    with pytest.raises(PermanentError):
        backend.send(_msgs())


# ---------------------------------------------------------------- presets


def test_endpoint_presets_rates_and_key_envs():
    expected = {
        "mistral-medium": (120, 2000, "MORPHOFORGE_MISTRAL_KEY"),
        "mistral-small": (120, 2000, "MORPHOFORGE_MISTRAL_KEY"),
        "mistral-tiny": (120, 2000, "MORPHOFORGE_MISTRAL_KEY"),
        "gpt-3.5-turbo": (500, 60, "MORPHOFORGE_OPENAI_KEY"),
        "gpt-4": (500, 10, "MORPHOFORGE_OPENAI_KEY"),
        "gpt-4-turbo": (500, 150, "MORPHOFORGE_OPENAI_KEY"),
    }
    assert set(ENDPOINT_PRESETS) == set(expected)
    for name, (rpm, tpm, env) in expected.items():
        cfg = ENDPOINT_PRESETS[name]
        assert (cfg.requests_per_minute, cfg.tokens_per_minute, cfg.api_key_env) == (rpm, tpm, env)
        assert cfg.model_name == name
        assert cfg.base_url.endswith("/chat/completions")


def test_endpoint_config_rejects_nonpositive_limits():
    with pytest.raises(ConfigError):
        EndpointConfig("u", "m", "K", 0, 100)
    with pytest.raises(ConfigError):
        EndpointConfig("u", "m", "K", 100, -1)
