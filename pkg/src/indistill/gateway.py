"""Uniform chat-completion client over live, scripted, and DSL-mock backends.

Every completion goes through `Gateway`, which adds a content-addressed
on-disk cache, exponential-backoff retries for transient failures, and
bounded-parallelism batching. Repeated samples of one prompt are told apart
by `sample_index`, which is part of the cache key, so warm-cache re-runs are
byte-identical and issue zero backend calls.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import requests

from . import dsl
from .tasks import INT_LIST, ParseFailure, parse_value

DEFAULT_MAX_TOKENS = 1024


class GatewayError(Exception):
    """Completion failed and will not be retried."""


class BackendConfigError(GatewayError):
    """Authentication or configuration problem; never retried."""


class TransientBackendError(GatewayError):
    """Retryable failure (rate limit, server error, connection problem)."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class RetryExhaustedError(GatewayError):
    def __init__(self, message: str, last: TransientBackendError):
        super().__init__(message)
        self.last = last


@dataclass(frozen=True)
class ChatRequest:
    model: str
    prompt: str
    temperature: float = 0.7
    top_p: float = 1.0
    max_tokens: int = DEFAULT_MAX_TOKENS
    sample_index: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0: {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1]: {self.top_p}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1: {self.max_tokens}")
        if self.sample_index < 0:
            raise ValueError(f"sample_index must be >= 0: {self.sample_index}")


@dataclass(frozen=True)
class UsageStats:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be >= 0")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: "UsageStats") -> "UsageStats":
        return UsageStats(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )


@dataclass(frozen=True)
class ChatExchange:
    request: ChatRequest
    completion: str
    usage: UsageStats
    backend: str
    timestamp: float


def count_tokens_mock(text: str) -> int:
    """Whitespace token count; approximate, used only by non-live backends."""
    return len(text.split())


def _mock_usage(prompt: str, completion: str) -> UsageStats:
    return UsageStats(count_tokens_mock(prompt), count_tokens_mock(completion))


def request_digest(backend_tag: str, request: ChatRequest) -> str:
    payload = json.dumps(
        {
            "backend": backend_tag,
            "model": request.model,
            "prompt": request.prompt,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
            "sample_index": request.sample_index,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def script_key(prompt: str) -> str:
    """Key under which a scripted-replay file stores completions for a prompt."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass
class HttpBackendConfig:
    base_url: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 120.0


class HttpBackend:
    """OpenAI-style chat-completions endpoint; usage comes from the response."""

    def __init__(self, config: HttpBackendConfig, session=None):
        api_key = os.environ.get(config.api_key_env)
        if not api_key:
            raise BackendConfigError(
                f"environment variable {config.api_key_env} is not set"
            )
        self.config = config
        self.tag = f"http:{config.base_url}"
        self.network_calls = 0
        self._session = session if session is not None else requests.Session()
        self._headers = {"Authorization": f"Bearer {api_key}"}
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> tuple[str, UsageStats]:
        with self._lock:
            self.network_calls += 1
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        body = {
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        try:
            response = self._session.post(
                url, json=body, headers=self._headers, timeout=self.config.timeout
            )
        except requests.RequestException as exc:
            raise TransientBackendError(f"connection failure: {exc}") from exc
        if response.status_code in (401, 403):
            raise BackendConfigError(f"authentication failed (HTTP {response.status_code})")
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(
                f"HTTP {response.status_code}", status=response.status_code
            )
        if response.status_code != 200:
            raise GatewayError(f"HTTP {response.status_code}: {response.text[:200]}")
        payload = response.json()
        try:
            completion = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise GatewayError(f"malformed completion payload: {str(payload)[:200]}") from None
        usage = payload.get("usage") or {}
        return completion, UsageStats(
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
        )


class ScriptedBackend:
    """Replays canned completions keyed by prompt digest and sample_index.

    `transient_failures` injects that many retryable failures before the first
    success, either globally (int) or per prompt digest (dict).
    """

    def __init__(self, script: dict[str, list[str]], transient_failures: int | dict[str, int] = 0):
        self.script = dict(script)
        digest = hashlib.sha256(
            json.dumps(self.script, sort_keys=True, ensure_ascii=False).encode("utf-8")
        ).hexdigest()
        self.tag = f"scripted:{digest[:12]}"
        self._lock = threading.Lock()
        if isinstance(transient_failures, int):
            self._global_failures = transient_failures
            self._per_key_failures: dict[str, int] = {}
        else:
            self._global_failures = 0
            self._per_key_failures = dict(transient_failures)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    @classmethod
    def from_pairs(cls, pairs, **kwargs) -> "ScriptedBackend":
        """Build from (prompt, [completions]) pairs; digests computed here."""
        return cls({script_key(prompt): list(completions) for prompt, completions in pairs}, **kwargs)

    def complete(self, request: ChatRequest) -> tuple[str, UsageStats]:
        key = script_key(request.prompt)
        with self._lock:
            if self._global_failures > 0:
                self._global_failures -= 1
                raise TransientBackendError("injected failure", status=429)
            remaining = self._per_key_failures.get(key, 0)
            if remaining > 0:
                self._per_key_failures[key] = remaining - 1
                raise TransientBackendError("injected failure", status=429)
        completions = self.script.get(key)
        if completions is None:
            raise GatewayError(f"no scripted completion for prompt digest {key[:12]}")
        if request.sample_index >= len(completions):
            raise GatewayError(
                f"scripted prompt {key[:12]} has {len(completions)} completions; "
                f"sample_index {request.sample_index} is out of range"
            )
        completion = completions[request.sample_index]
        return completion, _mock_usage(request.prompt, completion)


def write_script(path: str | Path, pairs) -> None:
    """Write a scripted-replay file from (prompt, [completions]) pairs."""
    script = {script_key(prompt): list(completions) for prompt, completions in pairs}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(script, fh, indent=2, sort_keys=True, ensure_ascii=False)


class DslMockBackend:
    """Deterministic teacher/student stand-in backed by ground-truth rules.

    Understands the three prompt layouts of the default templates:
    rule-generation (demonstration pairs only), rule-following (a Rule line
    plus one input), and direct few-shot (pairs plus a trailing query input).
    Tasks are recognized by the digest of their rendered demonstrations.
    """

    def __init__(self, suite, config: dsl.MockTeacherConfig):
        self.config = config
        self.registry: dict[str, tuple] = {}
        for task, true_rule in suite:
            key = dsl.task_key(task)
            if key in self.registry:
                raise BackendConfigError(f"duplicate demonstrations for task {task.task_id}")
            self.registry[key] = (task, true_rule)
        self.tag = (
            f"dsl-mock(seed={config.seed},p={config.correct_rule_probability}"
            f",eps={config.follow_error_rate})"
        )

    def complete(self, request: ChatRequest) -> tuple[str, UsageStats]:
        completion = self._respond(request.prompt, request.sample_index)
        return completion, _mock_usage(request.prompt, completion)

    def _respond(self, prompt: str, sample_index: int) -> str:
        rule_text = None
        pairs: list[tuple[str, str]] = []
        query: str | None = None
        pending: str | None = None
        for line in prompt.splitlines():
            if line.startswith("Rule: "):
                rule_text = line[len("Rule: "):]
            elif line.startswith("Input: "):
                pending = line[len("Input: "):]
            elif line.startswith("Output: ") and pending is not None:
                pairs.append((pending, line[len("Output: "):]))
                pending = None
            elif line == "Output:" and pending is not None:
                query = pending
                pending = None

        if rule_text is not None:
            if query is None:
                raise GatewayError("rule-following prompt without an input line")
            value = parse_value(INT_LIST, query)
            if isinstance(value, ParseFailure):
                raise GatewayError(f"mock backend cannot parse input {query!r}")
            result = dsl.mock_teacher_follow(rule_text, value, self.config)
            if isinstance(result, ParseFailure):
                return "cannot apply the given rule"
            return repr(list(result.payload))

        if not pairs:
            raise GatewayError("mock backend cannot classify this prompt")
        examples_block = "\n\n".join(f"Input: {x}\nOutput: {y}" for x, y in pairs)
        key = hashlib.sha256(examples_block.encode("utf-8")).hexdigest()
        entry = self.registry.get(key)
        if entry is None:
            raise BackendConfigError("prompt does not match any registered mock task")
        task, true_rule = entry

        if query is not None:
            value = parse_value(INT_LIST, query)
            if isinstance(value, ParseFailure):
                raise GatewayError(f"mock backend cannot parse input {query!r}")
            result = dsl.mock_teacher_follow(
                dsl.render_rule_text(true_rule), value, self.config
            )
            assert not isinstance(result, ParseFailure)
            return repr(list(result.payload))

        return dsl.mock_teacher_generate(task, true_rule, sample_index + 1, self.config)[-1]


@dataclass
class RetryPolicy:
    max_retries: int = 4
    base_delay: float = 0.5
    multiplier: float = 2.0
    max_delay: float = 30.0


@dataclass
class BatchResult:
    """complete_many output; exchanges[i] corresponds to requests[i]."""

    exchanges: list[ChatExchange | None]
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def failed_indices(self) -> list[int]:
        return sorted(self.failures)


class Gateway:
    """Caching, retrying front end over one backend."""

    def __init__(
        self,
        backend,
        cache_dir: str | Path | None = None,
        retry: RetryPolicy | None = None,
        sleep=time.sleep,
    ):
        self.backend = backend
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.retry = retry if retry is not None else RetryPolicy()
        self._sleep = sleep
        self._lock = threading.Lock()
        self.backend_calls = 0
        self.cache_hits = 0

    @property
    def network_calls(self) -> int:
        return getattr(self.backend, "network_calls", 0)

    def _cache_path(self, digest: str) -> Path:
        assert self.cache_dir is not None
        return self.cache_dir / digest[:2] / f"{digest}.json"

    def _cache_read(self, digest: str, request: ChatRequest) -> ChatExchange | None:
        if self.cache_dir is None:
            return None
        path = self._cache_path(digest)
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            stored = json.load(fh)
        return ChatExchange(
            request=request,
            completion=stored["completion"],
            usage=UsageStats(**stored["usage"]),
            backend=stored["backend"],
            timestamp=stored["timestamp"],
        )

    def _cache_write(self, digest: str, exchange: ChatExchange) -> None:
        if self.cache_dir is None:
            return
        path = self._cache_path(digest)
        record = {
            "completion": exchange.completion,
            "usage": {
                "prompt_tokens": exchange.usage.prompt_tokens,
                "completion_tokens": exchange.usage.completion_tokens,
            },
            "backend": exchange.backend,
            "timestamp": exchange.timestamp,
        }
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(record, fh, ensure_ascii=False)
            os.replace(tmp, path)

    def complete(self, request: ChatRequest) -> ChatExchange:
        digest = request_digest(self.backend.tag, request)
        cached = self._cache_read(digest, request)
        if cached is not None:
            with self._lock:
                self.cache_hits += 1
            return cached

        delay = self.retry.base_delay
        attempt = 0
        while True:
            with self._lock:
                self.backend_calls += 1
            try:
                completion, usage = self.backend.complete(request)
                break
            except TransientBackendError as exc:
                attempt += 1
                if attempt > self.retry.max_retries:
                    raise RetryExhaustedError(
                        f"gave up after {self.retry.max_retries} retries: {exc}", last=exc
                    ) from exc
                self._sleep(delay)
                delay = min(delay * self.retry.multiplier, self.retry.max_delay)

        exchange = ChatExchange(
            request=request,
            completion=completion,
            usage=usage,
            backend=self.backend.tag,
            timestamp=time.time(),
        )
        self._cache_write(digest, exchange)
        return exchange

    def complete_many(self, requests_list, max_in_flight: int) -> BatchResult:
        """Complete a batch; results keep request order, failures are per-index."""
        if max_in_flight < 1:
            raise ValueError(f"max_in_flight must be >= 1: {max_in_flight}")
        requests_list = list(requests_list)
        exchanges: list[ChatExchange | None] = [None] * len(requests_list)
        failures: dict[int, str] = {}
        if not requests_list:
            return BatchResult(exchanges)
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            futures = {
                pool.submit(self.complete, request): i
                for i, request in enumerate(requests_list)
            }
            for future, i in futures.items():
                try:
                    exchanges[i] = future.result()
                except GatewayError as exc:
                    failures[i] = str(exc)
        return BatchResult(exchanges, failures)
