"""Sampler: cache keys, append-only cache, retries, replay, resumability."""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from cotpack.ingest import QuestionRecord
from cotpack.packer import pack
from cotpack.sampler import (
    BackendError,
    CompletionResult,
    DecodeParams,
    GenerationRecord,
    HttpCompletionsBackend,
    ReplayBackend,
    SampleCache,
    Sampler,
    Usage,
    cache_key,
)


def make_spec(qid="a", text="1+1=?", family="r1-distill"):
    return pack([QuestionRecord(id=qid, text=text, gold_answer="2")], family)


def make_plan(n_prompts: int):
    return [make_spec(qid=f"q{i}", text=f"What is {i}+{i}?") for i in range(n_prompts)]


PARAMS = DecodeParams(max_tokens=512, samples=8)


def seed_replay(directory, plan, params, model, text_for=None):
    """Write replay fixtures for every (spec, sample_index) key."""
    directory.mkdir(parents=True, exist_ok=True)
    keys = []
    for spec in plan:
        for i in range(params.samples):
            key = cache_key(spec, params, i, model)
            payload = {
                "text": text_for(spec, i) if text_for else f"<think>t{i}</think>\\boxed{{2}}",
                "finish_reason": "stop",
                "prompt_tokens": 12,
                "completion_tokens": 40,
            }
            (directory / f"{key}.json").write_text(json.dumps(payload), encoding="utf-8")
            keys.append(key)
    return keys


class TestDecodeParams:
    def test_defaults(self):
        params = DecodeParams()
        assert (params.temperature, params.top_p, params.samples) == (0.6, 0.95, 8)
        assert params.max_tokens == 32768

    def test_family_defaults(self):
        assert DecodeParams.for_family("qwen3").max_tokens == 32768
        assert DecodeParams.for_family("r1-distill").max_tokens == 16384

    def test_validation(self):
        with pytest.raises(ValueError):
            DecodeParams(temperature=-1)
        with pytest.raises(ValueError):
            DecodeParams(top_p=0)
        with pytest.raises(ValueError):
            DecodeParams(samples=0)


class TestCacheKey:
    def test_deterministic(self):
        spec = make_spec()
        assert cache_key(spec, PARAMS, 0, "m") == cache_key(spec, PARAMS, 0, "m")

    def test_sample_index_separates(self):
        spec = make_spec()
        assert cache_key(spec, PARAMS, 0, "m") != cache_key(spec, PARAMS, 1, "m")

    def test_prompt_byte_sensitivity(self):
        a = make_spec(text="1+1=?")
        b = make_spec(text="1+1=!")
        assert cache_key(a, PARAMS, 0, "m") != cache_key(b, PARAMS, 0, "m")

    def test_params_and_model_sensitivity(self):
        spec = make_spec()
        other = DecodeParams(max_tokens=513, samples=8)
        assert cache_key(spec, PARAMS, 0, "m") != cache_key(spec, other, 0, "m")
        assert cache_key(spec, PARAMS, 0, "m") != cache_key(spec, PARAMS, 0, "m2")


class TestSampleCache:
    def test_round_trip(self, tmp_path):
        cache = SampleCache(tmp_path / "c")
        record = GenerationRecord("p", 0, "text", "stop", Usage(1, 2), PARAMS, "m", "now")
        assert cache.put("k", record)
        assert cache.get("k") == record

    def test_append_only(self, tmp_path):
        cache = SampleCache(tmp_path / "c")
        first = GenerationRecord("p", 0, "original", "stop", Usage(), PARAMS, "m", "now")
        cache.put("k", first)
        clobber = GenerationRecord("p", 0, "clobbered", "stop", Usage(), PARAMS, "m", "later")
        assert not cache.put("k", clobber)
        assert cache.get("k").raw_text == "original"

    def test_missing(self, tmp_path):
        assert SampleCache(tmp_path / "c").get("nope") is None


class TestReplay:
    def test_replay_returns_fixtures_without_network(self, tmp_path):
        plan = [make_spec()]
        replay_dir = tmp_path / "replay"
        seed_replay(replay_dir, plan, PARAMS, "model-x")
        backend = ReplayBackend(replay_dir)
        sampler = Sampler(backend, SampleCache(tmp_path / "cache"), "model-x")
        records = sampler.sample(plan[0], PARAMS)
        assert len(records) == 8
        assert all(r.finish_reason == "stop" for r in records)
        assert len(backend.request_log) == 8
        # second invocation is served from cache: no new backend traffic
        again = sampler.sample(plan[0], PARAMS)
        assert len(backend.request_log) == 8
        assert [r.raw_text for r in again] == [r.raw_text for r in records]

    def test_missing_fixture_is_error_record(self, tmp_path):
        backend = ReplayBackend(tmp_path / "empty")
        sampler = Sampler(backend, SampleCache(tmp_path / "cache"), "model-x")
        records = sampler.sample(make_spec(), DecodeParams(max_tokens=64, samples=2))
        assert [r.finish_reason for r in records] == ["error", "error"]
        assert "missing_fixture" in records[0].detail


class CountingBackend:
    """In-memory backend tracking concurrency, with an optional trip wire."""

    def __init__(self, delay=0.0, allow: int | None = None):
        self.delay = delay
        self.allow = allow
        self.calls = 0
        self.inflight = 0
        self.max_inflight = 0
        self.intervals = []
        self.lock = threading.Lock()

    def complete(self, prompt, params, model, key) -> CompletionResult:
        with self.lock:
            self.calls += 1
            if self.allow is not None and self.calls > self.allow:
                raise InterruptedError("tripped")
            self.inflight += 1
            self.max_inflight = max(self.max_inflight, self.inflight)
        start = time.monotonic()
        if self.delay:
            time.sleep(self.delay)
        with self.lock:
            self.inflight -= 1
            self.intervals.append((start, time.monotonic()))
        return CompletionResult("<think>x</think>\\boxed{2}", "stop", 5, 9)


class TestRunPlan:
    def test_empty_plan_rejected(self, tmp_path):
        sampler = Sampler(CountingBackend(), SampleCache(tmp_path / "c"), "m")
        with pytest.raises(ValueError):
            sampler.run_plan([], PARAMS)

    def test_budget_bounds_inflight(self, tmp_path):
        backend = CountingBackend(delay=0.005)
        sampler = Sampler(backend, SampleCache(tmp_path / "c"), "m")
        sampler.run_plan(make_plan(4), DecodeParams(max_tokens=64, samples=4), budget=3)
        assert backend.max_inflight <= 3
        assert backend.calls == 16

    def test_budget_one_is_sequential(self, tmp_path):
        backend = CountingBackend(delay=0.003)
        sampler = Sampler(backend, SampleCache(tmp_path / "c"), "m")
        sampler.run_plan(make_plan(2), DecodeParams(max_tokens=64, samples=3), budget=1)
        intervals = sorted(backend.intervals)
        for (_, end), (start, _) in zip(intervals, intervals[1:]):
            assert start >= end

    def test_interrupt_and_resume_issues_exactly_missing(self, tmp_path):
        plan = make_plan(10)
        params = DecodeParams(max_tokens=64, samples=8)
        replay_dir = tmp_path / "replay"
        seed_replay(replay_dir, plan, params, "m")
        cache = SampleCache(tmp_path / "cache")

        class TrippedReplay(ReplayBackend):
            def __init__(self, directory, allow):
                super().__init__(directory)
                self.allow = allow

            def complete(self, prompt, params, model, key):
                with self._log_lock:
                    if len(self.request_log) >= self.allow:
                        raise InterruptedError("tripped")
                return super().complete(prompt, params, model, key)

        tripped = TrippedReplay(replay_dir, allow=43)
        with pytest.raises(InterruptedError):
            Sampler(tripped, cache, "m").run_plan(plan, params, budget=1)
        assert len(cache.keys()) == 43

        fresh = ReplayBackend(replay_dir)
        manifest = Sampler(fresh, cache, "m").run_plan(plan, params, budget=1)
        assert len(fresh.request_log) == 80 - 43
        assert manifest["issued"] == 37
        assert manifest["cached"] == 43
        assert len(cache.keys()) == 80

        # resumed cache content matches an uninterrupted run
        clean_cache = SampleCache(tmp_path / "clean")
        Sampler(ReplayBackend(replay_dir), clean_cache, "m").run_plan(plan, params, budget=2)
        for key in clean_cache.keys():
            a, b = cache.get(key), clean_cache.get(key)
            assert (a.raw_text, a.finish_reason, a.usage) == (b.raw_text, b.finish_reason, b.usage)

    def test_manifest_write_ahead_aborts_before_requests(self, tmp_path):
        backend = CountingBackend()
        sampler = Sampler(backend, SampleCache(tmp_path / "c"), "m")
        with pytest.raises(OSError):
            sampler.run_plan(make_plan(1), PARAMS, manifest_path=tmp_path / "no" / "dir" / "m.json")
        assert backend.calls == 0

    def test_completion_tokens_within_cap(self, tmp_path):
        plan = make_plan(3)
        params = DecodeParams(max_tokens=64, samples=4)
        replay_dir = tmp_path / "replay"
        seed_replay(replay_dir, plan, params, "m")
        cache = SampleCache(tmp_path / "cache")
        Sampler(ReplayBackend(replay_dir), cache, "m").run_plan(plan, params)
        for key in cache.keys():
            record = cache.get(key)
            assert record.usage.completion_tokens <= params.max_tokens


class ScriptedHandler(BaseHTTPRequestHandler):
    script: list = []
    requests_seen: list = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        body["_auth"] = self.headers.get("Authorization")
        type(self).requests_seen.append(body)
        action = self.script.pop(0) if self.script else ("ok", "fallback")
        if action[0] == "ok":
            payload = {
                "choices": [{"text": action[1], "finish_reason": "stop"}],
                "usage": {"prompt_tokens": 3, "completion_tokens": 7},
            }
            data = json.dumps(payload).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
        else:
            status, message = action
            data = message.encode()
            self.send_response(status)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def scripted_server():
    ScriptedHandler.script = []
    ScriptedHandler.requests_seen = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), ScriptedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}", ScriptedHandler
    server.shutdown()


class TestHttpBackend:
    def test_success_payload(self, scripted_server):
        url, handler = scripted_server
        handler.script = [("ok", "hello")]
        backend = HttpCompletionsBackend(url, sleeper=lambda s: None)
        result = backend.complete("PROMPT", PARAMS, "model-z", "key")
        assert result.text == "hello"
        assert result.completion_tokens == 7
        sent = handler.requests_seen[0]
        assert sent["prompt"] == "PROMPT"
        assert sent["n"] == 1
        assert sent["model"] == "model-z"

    def test_retries_on_429_then_succeeds(self, scripted_server):
        url, handler = scripted_server
        handler.script = [(429, "slow down"), (500, "boom"), ("ok", "finally")]
        sleeps = []
        backend = HttpCompletionsBackend(url, sleeper=sleeps.append)
        result = backend.complete("p", PARAMS, "m", "k")
        assert result.text == "finally"
        assert sleeps == [1.0, 4.0]

    def test_gives_up_after_retries(self, scripted_server):
        url, handler = scripted_server
        handler.script = [(503, "down")] * 10
        backend = HttpCompletionsBackend(url, retries=3, sleeper=lambda s: None)
        with pytest.raises(BackendError) as exc:
            backend.complete("p", PARAMS, "m", "k")
        assert exc.value.kind == "transport"
        assert len(handler.requests_seen) == 4  # initial try + 3 retries

    def test_context_overflow_flagged_not_retried(self, scripted_server):
        url, handler = scripted_server
        handler.script = [(400, "maximum context length exceeded")]
        backend = HttpCompletionsBackend(url, sleeper=lambda s: None)
        with pytest.raises(BackendError) as exc:
            backend.complete("p", PARAMS, "m", "k")
        assert exc.value.kind == "context_overflow"
        assert len(handler.requests_seen) == 1

    def test_endpoint_down_yields_error_records(self, tmp_path):
        backend = HttpCompletionsBackend("http://127.0.0.1:1", retries=1, sleeper=lambda s: None)
        sampler = Sampler(backend, SampleCache(tmp_path / "c"), "m")
        records = sampler.sample(make_spec(), DecodeParams(max_tokens=32, samples=3))
        assert [r.finish_reason for r in records] == ["error"] * 3
        assert all("transport" in r.detail for r in records)

    def test_api_key_header(self, scripted_server):
        url, handler = scripted_server
        handler.script = [("ok", "x")]
        backend = HttpCompletionsBackend(url, api_key="sk-test", sleeper=lambda s: None)
        backend.complete("p", PARAMS, "m", "k")
        assert handler.requests_seen[0]["_auth"] == "Bearer sk-test"
