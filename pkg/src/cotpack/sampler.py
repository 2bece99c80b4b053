"""Execution of prompt plans against an inference endpoint or a replay store.

One completion request per (prompt, sample_index) keeps the cache
content-addressed: the key hashes the rendered prompt bytes together with
the decode parameters, the sample index, and the endpoint model, so a rerun
(or another machine) reuses every finished record and issues requests only
for missing keys. The cache is append-only; records are never overwritten.

The HTTP backend speaks the OpenAI-compatible raw completions protocol
(`POST <base>/v1/completions`) carrying the pre-rendered template string,
which is the only way to guarantee byte-exact prompts across servers.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import requests

from .families import get_family
from .packer import PromptSpec

RETRYABLE_STATUS = (429, 500, 502, 503, 504)
DEFAULT_BACKOFF = (1.0, 4.0, 16.0)


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.6
    top_p: float = 0.95
    max_tokens: int = 32768
    samples: int = 8

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.samples < 1:
            raise ValueError("samples must be positive")

    @classmethod
    def for_family(cls, family: str, **overrides) -> "DecodeParams":
        overrides.setdefault("max_tokens", get_family(family).default_max_tokens)
        return cls(**overrides)

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "samples": self.samples,
        }


@dataclass
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass
class GenerationRecord:
    prompt_id: str
    sample_index: int
    raw_text: str
    finish_reason: str  # stop | length | error
    usage: Usage
    params: DecodeParams
    endpoint_model: str
    created_at: str
    detail: str = ""

    @property
    def truncated(self) -> bool:
        return self.finish_reason == "length"

    def to_dict(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "sample_index": self.sample_index,
            "raw_text": self.raw_text,
            "finish_reason": self.finish_reason,
            "usage": {
                "prompt_tokens": self.usage.prompt_tokens,
                "completion_tokens": self.usage.completion_tokens,
            },
            "params": self.params.to_dict(),
            "endpoint_model": self.endpoint_model,
            "created_at": self.created_at,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationRecord":
        return cls(
            prompt_id=d["prompt_id"],
            sample_index=d["sample_index"],
            raw_text=d["raw_text"],
            finish_reason=d["finish_reason"],
            usage=Usage(**d.get("usage", {})),
            params=DecodeParams(**d["params"]),
            endpoint_model=d["endpoint_model"],
            created_at=d["created_at"],
            detail=d.get("detail", ""),
        )


def cache_key(spec: PromptSpec, params: DecodeParams, sample_index: int, endpoint_model: str) -> str:
    """Stable content hash addressing one sample of one prompt."""
    h = hashlib.sha256()
    h.update(spec.rendered.encode("utf-8"))
    h.update(b"\x00")
    h.update(
        json.dumps(
            {
                "temperature": params.temperature,
                "top_p": params.top_p,
                "max_tokens": params.max_tokens,
                "sample_index": sample_index,
                "model": endpoint_model,
            },
            sort_keys=True,
        ).encode("utf-8")
    )
    return h.hexdigest()


class SampleCache:
    """Directory of content-addressed generation records, one JSON file each.

    Appends are serialized and atomic (tmp + rename); existing keys are
    never overwritten, so concurrent readers always see complete records.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    def path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> GenerationRecord | None:
        path = self.path(key)
        if not path.exists():
            return None
        return GenerationRecord.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def put(self, key: str, record: GenerationRecord) -> bool:
        """Store a record unless the key already exists. Returns True when written."""
        path = self.path(key)
        with self._write_lock:
            if path.exists():
                return False
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(record.to_dict(), ensure_ascii=False), encoding="utf-8")
            tmp.rename(path)
            return True

    def keys(self) -> list[str]:
        return sorted(p.stem for p in self.directory.glob("*.json"))


class BackendError(Exception):
    """A completion attempt failed; `kind` feeds the error record detail."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class CompletionResult:
    text: str
    finish_reason: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


class HttpCompletionsBackend:
    """OpenAI-compatible /v1/completions client with bounded retries.

    Retries transport errors and 5xx/429 with exponential backoff;
    other 4xx responses fail immediately (context-length rejections are
    flagged context_overflow).
    """

    def __init__(
        self,
        base_url: str,
        *,
        api_key: str | None = None,
        timeout: float = 600.0,
        retries: int = 3,
        backoff: tuple[float, ...] = DEFAULT_BACKOFF,
        sleeper=time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.sleeper = sleeper
        self.session = requests.Session()

    def complete(self, prompt: str, params: DecodeParams, model: str, key: str) -> CompletionResult:
        payload = {
            "model": model,
            "prompt": prompt,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
            "n": 1,
        }
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error = "no attempt made"
        for attempt in range(self.retries + 1):
            if attempt:
                self.sleeper(self.backoff[min(attempt - 1, len(self.backoff) - 1)])
            try:
                resp = self.session.post(
                    f"{self.base_url}/v1/completions", json=payload,
                    headers=headers, timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                body = resp.text[:500]
                if resp.status_code == 400 and "context" in body.lower():
                    raise BackendError("context_overflow", body)
                raise BackendError("rejected", f"HTTP {resp.status_code}: {body}")
            data = resp.json()
            choice = data["choices"][0]
            usage = data.get("usage", {})
            return CompletionResult(
                text=choice.get("text", ""),
                finish_reason=choice.get("finish_reason", "stop"),
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
            )
        raise BackendError("transport", f"gave up after {self.retries} retries: {last_error}")


class ReplayBackend:
    """Deterministic backend serving fixture files keyed by cache key.

    Every lookup is appended to `request_log`, which the test harness uses
    to assert resumption request counts and in-flight bounds.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.request_log: list[str] = []
        self._log_lock = threading.Lock()

    def complete(self, prompt: str, params: DecodeParams, model: str, key: str) -> CompletionResult:
        with self._log_lock:
            self.request_log.append(key)
        path = self.directory / f"{key}.json"
        if not path.exists():
            raise BackendError("missing_fixture", f"no replay fixture for key {key}")
        data = json.loads(path.read_text(encoding="utf-8"))
        return CompletionResult(
            text=data["text"],
            finish_reason=data.get("finish_reason", "stop"),
            prompt_tokens=int(data.get("prompt_tokens", 0)),
            completion_tokens=int(data.get("completion_tokens", 0)),
        )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class Sampler:
    """Cache-first sampler over a completion backend."""

    def __init__(self, backend, cache: SampleCache, endpoint_model: str):
        self.backend = backend
        self.cache = cache
        self.endpoint_model = endpoint_model

    def _fetch(self, spec: PromptSpec, params: DecodeParams, sample_index: int, key: str) -> GenerationRecord:
        try:
            result = self.backend.complete(spec.rendered, params, self.endpoint_model, key)
            record = GenerationRecord(
                prompt_id=spec.prompt_id,
                sample_index=sample_index,
                raw_text=result.text,
                finish_reason=result.finish_reason,
                usage=Usage(result.prompt_tokens, result.completion_tokens),
                params=params,
                endpoint_model=self.endpoint_model,
                created_at=_now(),
            )
        except BackendError as exc:
            record = GenerationRecord(
                prompt_id=spec.prompt_id,
                sample_index=sample_index,
                raw_text="",
                finish_reason="error",
                usage=Usage(),
                params=params,
                endpoint_model=self.endpoint_model,
                created_at=_now(),
                detail=f"{exc.kind}: {exc}",
            )
        self.cache.put(key, record)
        return record

    def sample(self, spec: PromptSpec, params: DecodeParams) -> list[GenerationRecord]:
        """Return exactly params.samples records, cache-first."""
        records = []
        for sample_index in range(params.samples):
            key = cache_key(spec, params, sample_index, self.endpoint_model)
            cached = self.cache.get(key)
            records.append(cached if cached else self._fetch(spec, params, sample_index, key))
        return records

    def cached_records(self, spec: PromptSpec, params: DecodeParams) -> list[GenerationRecord | None]:
        return [
            self.cache.get(cache_key(spec, params, i, self.endpoint_model))
            for i in range(params.samples)
        ]

    def run_plan(
        self,
        plan: list[PromptSpec],
        params: DecodeParams,
        budget: int = 1,
        manifest_path: str | Path | None = None,
    ) -> dict:
        """Sample every spec in the plan with at most ``budget`` requests in
        flight; resumes from cache, issuing requests only for missing keys.

        The intent manifest is written before any request goes out; a write
        failure aborts the run with no network traffic spent.
        """
        if not plan:
            raise ValueError("plan is empty")
        if budget < 1:
            raise ValueError("budget must be >= 1")

        work: list[tuple[PromptSpec, int, str]] = []
        cached_count = 0
        for spec in plan:
            for sample_index in range(params.samples):
                key = cache_key(spec, params, sample_index, self.endpoint_model)
                if self.cache.get(key) is None:
                    work.append((spec, sample_index, key))
                else:
                    cached_count += 1

        manifest = {
            "status": "running",
            "endpoint_model": self.endpoint_model,
            "params": params.to_dict(),
            "prompts": len(plan),
            "requested": len(plan) * params.samples,
            "cached": cached_count,
            "pending": len(work),
            "budget": budget,
        }
        if manifest_path is not None:
            Path(manifest_path).write_text(json.dumps(manifest, indent=2), encoding="utf-8")

        started = time.monotonic()
        issued = 0
        errors = 0
        usage = Usage()
        if work:
            with ThreadPoolExecutor(max_workers=budget) as pool:
                futures = [pool.submit(self._fetch, spec, params, i, key) for spec, i, key in work]
                try:
                    for fut in futures:
                        record = fut.result()
                        issued += 1
                        if record.finish_reason == "error":
                            errors += 1
                        usage.prompt_tokens += record.usage.prompt_tokens
                        usage.completion_tokens += record.usage.completion_tokens
                except BaseException:
                    pool.shutdown(wait=False, cancel_futures=True)
                    raise

        per_prompt = {}
        for spec in plan:
            statuses = [r.finish_reason if r else "missing" for r in self.cached_records(spec, params)]
            per_prompt[spec.prompt_id] = {
                "samples": len(statuses),
                "complete": sum(s in ("stop", "length") for s in statuses),
                "errors": sum(s == "error" for s in statuses),
            }

        manifest.update(
            status="complete",
            issued=issued,
            errors=errors,
            usage={"prompt_tokens": usage.prompt_tokens, "completion_tokens": usage.completion_tokens},
            wall_time_s=round(time.monotonic() - started, 3),
            per_prompt=per_prompt,
        )
        if manifest_path is not None:
            Path(manifest_path).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        return manifest
