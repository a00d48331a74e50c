import json
import threading
import time

import pytest

from indistill import dsl
from indistill.gateway import (
    BackendConfigError,
    ChatRequest,
    DslMockBackend,
    Gateway,
    GatewayError,
    HttpBackend,
    HttpBackendConfig,
    RetryExhaustedError,
    RetryPolicy,
    ScriptedBackend,
    UsageStats,
    count_tokens_mock,
    request_digest,
    script_key,
    write_script,
)
from indistill.tasks import DEFAULT_TEMPLATES, TaskValue, parse_output, render_prompt

FAST_RETRY = RetryPolicy(max_retries=4, base_delay=0.0)


def request(prompt="hello world", **kwargs):
    return ChatRequest(model="m", prompt=prompt, **kwargs)


class TestChatRequest:
    def test_validation(self):
        with pytest.raises(ValueError):
            request(temperature=-0.1)
        with pytest.raises(ValueError):
            request(top_p=0.0)
        with pytest.raises(ValueError):
            request(max_tokens=0)
        with pytest.raises(ValueError):
            request(sample_index=-1)

    def test_usage_totals(self):
        u = UsageStats(3, 4) + UsageStats(1, 2)
        assert (u.prompt_tokens, u.completion_tokens, u.total_tokens) == (4, 6, 10)
        with pytest.raises(ValueError):
            UsageStats(-1, 0)

    def test_count_tokens_mock(self):
        assert count_tokens_mock("a b  c\nd") == 4
        assert count_tokens_mock("") == 0


class CountingBackend:
    """Test double: counts calls and concurrency, optional per-call delay."""

    tag = "counting"

    def __init__(self, delay=0.0):
        self.calls = 0
        self.delay = delay
        self.active = 0
        self.max_active = 0
        self._lock = threading.Lock()

    def complete(self, req):
        with self._lock:
            self.calls += 1
            self.active += 1
            self.max_active = max(self.max_active, self.active)
        if self.delay:
            time.sleep(self.delay)
        with self._lock:
            self.active -= 1
        return f"echo:{req.prompt}:{req.sample_index}", UsageStats(1, 1)


class TestCache:
    def test_identical_request_served_from_cache(self, tmp_path):
        backend = CountingBackend()
        gw = Gateway(backend, cache_dir=tmp_path / "cache")
        first = gw.complete(request())
        second = gw.complete(request())
        assert backend.calls == 1
        assert gw.cache_hits == 1
        assert second.completion == first.completion
        assert second.usage == first.usage

    def test_warm_cache_survives_new_gateway(self, tmp_path):
        gw1 = Gateway(CountingBackend(), cache_dir=tmp_path / "cache")
        exchange = gw1.complete(request())
        backend2 = CountingBackend()
        gw2 = Gateway(backend2, cache_dir=tmp_path / "cache")
        replay = gw2.complete(request())
        assert backend2.calls == 0
        assert replay.completion == exchange.completion
        assert replay.timestamp == exchange.timestamp

    def test_cache_key_separates_samples_and_settings(self):
        base = request()
        assert request_digest("t", base) != request_digest("t", request(sample_index=1))
        assert request_digest("t", base) != request_digest("t", request(temperature=0.9))
        assert request_digest("t", base) != request_digest("other", base)

    def test_no_cache_dir_means_no_reuse(self):
        backend = CountingBackend()
        gw = Gateway(backend)
        gw.complete(request())
        gw.complete(request())
        assert backend.calls == 2


class TestRetries:
    def test_two_429s_then_success(self):
        prompt = "flaky prompt"
        backend = ScriptedBackend.from_pairs([(prompt, ["ok"])], transient_failures=2)
        gw = Gateway(backend, retry=FAST_RETRY)
        exchange = gw.complete(request(prompt))
        assert exchange.completion == "ok"
        assert gw.backend_calls == 3

    def test_retries_exhausted(self):
        backend = ScriptedBackend.from_pairs([("p", ["ok"])], transient_failures=99)
        gw = Gateway(backend, retry=RetryPolicy(max_retries=2, base_delay=0.0))
        with pytest.raises(RetryExhaustedError) as err:
            gw.complete(request("p"))
        assert err.value.last.status == 429

    def test_backoff_delays_grow(self):
        sleeps = []
        backend = ScriptedBackend.from_pairs([("p", ["ok"])], transient_failures=3)
        gw = Gateway(
            backend,
            retry=RetryPolicy(max_retries=4, base_delay=0.5, multiplier=2.0),
            sleep=sleeps.append,
        )
        gw.complete(request("p"))
        assert sleeps == [0.5, 1.0, 2.0]

    def test_missing_script_entry_not_retried(self):
        backend = ScriptedBackend({})
        gw = Gateway(backend, retry=FAST_RETRY)
        with pytest.raises(GatewayError):
            gw.complete(request("unknown"))
        assert gw.backend_calls == 1


class TestScriptedBackend:
    def test_sample_index_picks_completion(self):
        backend = ScriptedBackend.from_pairs([("p", ["first", "second"])])
        gw = Gateway(backend)
        assert gw.complete(request("p", sample_index=0)).completion == "first"
        assert gw.complete(request("p", sample_index=1)).completion == "second"
        with pytest.raises(GatewayError):
            gw.complete(request("p", sample_index=2))

    def test_script_file_round_trip(self, tmp_path):
        path = tmp_path / "script.json"
        write_script(path, [("hello", ["hi there"])])
        stored = json.loads(path.read_text())
        assert stored == {script_key("hello"): ["hi there"]}
        backend = ScriptedBackend.from_file(path)
        assert Gateway(backend).complete(request("hello")).completion == "hi there"

    def test_mock_usage_accounting(self):
        backend = ScriptedBackend.from_pairs([("two words", ["three word reply"])])
        exchange = Gateway(backend).complete(request("two words"))
        assert exchange.usage == UsageStats(2, 3)


class TestCompleteMany:
    def test_order_preserved_under_concurrency(self):
        backend = CountingBackend(delay=0.002)
        gw = Gateway(backend)
        requests = [request(f"p{i}") for i in range(20)]
        batch = gw.complete_many(requests, max_in_flight=8)
        assert not batch.failures
        for i, exchange in enumerate(batch.exchanges):
            assert exchange.completion == f"echo:p{i}:0"

    def test_bounded_parallelism_is_hard(self):
        backend = CountingBackend(delay=0.005)
        gw = Gateway(backend)
        gw.complete_many([request(f"p{i}") for i in range(30)], max_in_flight=4)
        assert backend.max_active <= 4

    def test_per_request_failures_do_not_abort(self):
        backend = ScriptedBackend.from_pairs([("good", ["fine"])])
        gw = Gateway(backend, retry=FAST_RETRY)
        batch = gw.complete_many([request("good"), request("bad")], max_in_flight=2)
        assert batch.exchanges[0].completion == "fine"
        assert batch.exchanges[1] is None
        assert batch.failed_indices == [1]

    def test_batch_usage_is_sum_of_exchanges(self):
        backend = CountingBackend()
        gw = Gateway(backend)
        batch = gw.complete_many([request(f"p{i}") for i in range(5)], max_in_flight=2)
        total = UsageStats()
        for exchange in batch.exchanges:
            total = total + exchange.usage
        assert total == UsageStats(5, 5)

    def test_max_in_flight_validated(self):
        with pytest.raises(ValueError):
            Gateway(CountingBackend()).complete_many([], max_in_flight=0)


class FakeResponse:
    def __init__(self, status_code, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload or {}
        self.text = text

    def json(self):
        return self._payload


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.posts = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.posts.append({"url": url, "json": json, "headers": headers})
        return self.responses.pop(0)


def http_backend(monkeypatch, responses):
    monkeypatch.setenv("TEST_API_KEY", "sekrit")
    config = HttpBackendConfig(base_url="http://example.test/v1", api_key_env="TEST_API_KEY")
    return HttpBackend(config, session=FakeSession(responses))


class TestHttpBackend:
    def _ok(self):
        return FakeResponse(
            200,
            {
                "choices": [{"message": {"content": "[2, 1]"}}],
                "usage": {"prompt_tokens": 11, "completion_tokens": 3},
            },
        )

    def test_missing_api_key_is_startup_error(self, monkeypatch):
        monkeypatch.delenv("NOPE_KEY", raising=False)
        with pytest.raises(BackendConfigError):
            HttpBackend(HttpBackendConfig(base_url="http://x", api_key_env="NOPE_KEY"))

    def test_success_parses_completion_and_usage(self, monkeypatch):
        backend = http_backend(monkeypatch, [self._ok()])
        completion, usage = backend.complete(request("reverse [1, 2]"))
        assert completion == "[2, 1]"
        assert usage == UsageStats(11, 3)
        post = backend._session.posts[0]
        assert post["url"] == "http://example.test/v1/chat/completions"
        assert post["json"]["messages"] == [{"role": "user", "content": "reverse [1, 2]"}]
        assert post["headers"]["Authorization"] == "Bearer sekrit"

    def test_transient_statuses_retried_through_gateway(self, monkeypatch):
        backend = http_backend(
            monkeypatch, [FakeResponse(429), FakeResponse(500), self._ok()]
        )
        gw = Gateway(backend, retry=FAST_RETRY)
        assert gw.complete(request()).completion == "[2, 1]"
        assert backend.network_calls == 3

    def test_auth_failure_is_not_retried(self, monkeypatch):
        backend = http_backend(monkeypatch, [FakeResponse(401)])
        gw = Gateway(backend, retry=FAST_RETRY)
        with pytest.raises(BackendConfigError):
            gw.complete(request())
        assert backend.network_calls == 1

    def test_malformed_payload(self, monkeypatch):
        backend = http_backend(monkeypatch, [FakeResponse(200, {"weird": True})])
        with pytest.raises(GatewayError):
            backend.complete(request())


class TestDslMockBackend:
    def test_rule_following_matches_oracle(self, mock_suite):
        config = dsl.MockTeacherConfig(follow_error_rate=0.0, seed=1)
        gw = Gateway(DslMockBackend(mock_suite, config))
        task = mock_suite[0][0]
        prompt = render_prompt(
            "rule-following",
            DEFAULT_TEMPLATES["list-function"],
            task,
            rule="reverse the list",
            test_input=TaskValue.int_list([1, 2]),
        )
        exchange = gw.complete(request(prompt))
        assert parse_output("list-function", exchange.completion) == TaskValue.int_list([2, 1])

    def test_rule_generation_uses_sample_index(self, mock_suite):
        config = dsl.MockTeacherConfig(correct_rule_probability=1.0, seed=2)
        gw = Gateway(DslMockBackend(mock_suite, config))
        task, true_rule = mock_suite[1]
        prompt = render_prompt("rule-generation", DEFAULT_TEMPLATES["list-function"], task)
        for j in range(3):
            exchange = gw.complete(request(prompt, sample_index=j))
            assert exchange.completion == dsl.render_rule_text(true_rule)

    def test_direct_fewshot_applies_true_rule(self, mock_suite):
        config = dsl.MockTeacherConfig(follow_error_rate=0.0, seed=3)
        gw = Gateway(DslMockBackend(mock_suite, config))
        task, true_rule = mock_suite[2]
        test_input = task.tests[0].input
        prompt = render_prompt(
            "direct-fewshot", DEFAULT_TEMPLATES["list-function"], task, test_input=test_input
        )
        exchange = gw.complete(request(prompt))
        parsed = parse_output("list-function", exchange.completion)
        assert list(parsed.payload) == dsl.eval_rule(true_rule, list(test_input.payload))

    def test_unknown_task_rejected(self, mock_suite):
        config = dsl.MockTeacherConfig(seed=0)
        backend = DslMockBackend(mock_suite, config)
        other_task, _ = dsl.generate_task(seed=999, rule_depth=1, n_demos=3, n_tests=1)
        prompt = render_prompt("rule-generation", DEFAULT_TEMPLATES["list-function"], other_task)
        with pytest.raises(BackendConfigError):
            backend.complete(request(prompt))

    def test_unparseable_rule_text_yields_unparseable_completion(self, mock_suite):
        config = dsl.MockTeacherConfig(seed=0)
        gw = Gateway(DslMockBackend(mock_suite, config))
        task = mock_suite[0][0]
        prompt = render_prompt(
            "rule-following",
            DEFAULT_TEMPLATES["list-function"],
            task,
            rule="not a real rule",
            test_input=TaskValue.int_list([1]),
        )
        exchange = gw.complete(request(prompt))
        from indistill.tasks import ParseFailure
        assert isinstance(parse_output("list-function", exchange.completion), ParseFailure)
