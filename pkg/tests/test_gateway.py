import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from ragtriad.domain import RunConfig
from ragtriad.gateway import (
    AuthError,
    BudgetExceeded,
    Completion,
    CompletionCache,
    CostMeter,
    HTTPChatBackend,
    JSONExtractionError,
    LLMGateway,
    MockScriptBackend,
    MockScriptError,
    RolePrompt,
    TransientBackendError,
    UnboundPlaceholder,
    extract_json_object,
    mock_token_count,
    render,
    role_prompt,
)


class TestRender:
    def test_interpreter_binding_lands_in_input_line(self):
        out = render(role_prompt("interpreter"), {"research_topic": "X"})
        assert "Medical Question: X" in out
        assert "{research_topic}" not in out

    def test_zero_placeholder_template_is_identity(self):
        template = RolePrompt(role="answerer", template="no placeholders here { } {NotOne}")
        assert render(template, {}) == "no placeholders here { } {NotOne}"

    def test_missing_binding_raises(self):
        with pytest.raises(UnboundPlaceholder) as exc:
            render(role_prompt("explorer"), {"clinical_schema": "s", "query_list": "q"})
        assert exc.value.name == "summaries"

    def test_substitution_is_verbatim(self):
        tricky = 'value with {braces} and "quotes" and \\ backslash'
        out = render(role_prompt("interpreter"), {"research_topic": tricky})
        assert tricky in out

    def test_json_skeleton_braces_survive(self):
        out = render(role_prompt("explorer"), {"clinical_schema": "s", "query_list": "q", "summaries": "m"})
        assert '"sufficiency": 0 or 1,' in out
        assert out.count("{") == out.count("}")


class TestExtractJson:
    def test_plain_object(self):
        assert extract_json_object('{"a": 1}') == {"a": 1}

    def test_object_wrapped_in_prose_and_fences(self):
        text = 'Sure! Here you go:\n```json\n{"a": {"b": [1, 2]}}\n```\nHope that helps.'
        assert extract_json_object(text) == {"a": {"b": [1, 2]}}

    def test_first_balanced_object_wins(self):
        assert extract_json_object('{"first": 1} {"second": 2}') == {"first": 1}

    def test_braces_inside_strings_do_not_confuse(self):
        assert extract_json_object('{"a": "close }"}') == {"a": "close }"}

    def test_unbalanced_prefix_skipped(self):
        assert extract_json_object('{oops {"a": 1}') == {"a": 1}

    def test_no_object_raises(self):
        with pytest.raises(JSONExtractionError):
            extract_json_object("no json at all")

    def test_strict_requires_pure_json(self):
        with pytest.raises(JSONExtractionError):
            extract_json_object('prefix {"a": 1}', strict=True)
        assert extract_json_object('{"a": 1}', strict=True) == {"a": 1}


class TestMockBackend:
    def test_scripted_responses_consumed_in_order_per_role(self):
        backend = MockScriptBackend.from_responses(
            {"interpreter": ["one", "two"], "explorer": ["x"]}
        )
        assert backend.send("interpreter", "p", 1.0).text == "one"
        assert backend.send("explorer", "p", 1.0).text == "x"
        assert backend.send("interpreter", "p", 1.0).text == "two"

    def test_token_rule_is_ceil_chars_over_four(self):
        backend = MockScriptBackend.from_responses({"interpreter": ["OK"]})
        completion = backend.send("interpreter", "x" * 9, 1.0)
        assert completion.tokens_in == 3  # ceil(9/4)
        assert completion.tokens_out == 1  # ceil(2/4)
        assert mock_token_count("") == 0

    def test_exhaustion_errors_by_default(self):
        backend = MockScriptBackend.from_responses({"interpreter": ["only"]})
        backend.send("interpreter", "p", 1.0)
        with pytest.raises(MockScriptError):
            backend.send("interpreter", "p", 1.0)

    def test_repeat_last_policy(self):
        backend = MockScriptBackend.from_responses(
            {"explorer": ["a", "b"]}, on_exhausted="repeat_last"
        )
        assert [backend.send("explorer", "p", 0.0).text for _ in range(4)] == ["a", "b", "b", "b"]

    def test_out_of_order_turns_rejected(self):
        with pytest.raises(MockScriptError):
            MockScriptBackend(
                [
                    {"role": "explorer", "turn": 1, "response": "x"},
                    {"role": "explorer", "turn": 0, "response": "y"},
                ]
            )

    def test_unknown_role_rejected(self):
        with pytest.raises(MockScriptError):
            MockScriptBackend([{"role": "oracle", "turn": 0, "response": "x"}])


class FlakyBackend:
    """Fails with transient errors a fixed number of times, then succeeds."""

    backend_id = "flaky"

    def __init__(self, failures: int) -> None:
        self.failures = failures
        self.attempts = 0

    def send(self, role, prompt, temperature):
        self.attempts += 1
        if self.attempts <= self.failures:
            raise TransientBackendError("induced failure")
        return Completion(text="OK", tokens_in=1, tokens_out=1, latency_ms=0)


class TestGatewayRetries:
    def test_two_failures_then_success_counts_one_call(self):
        backend = FlakyBackend(failures=2)
        config = RunConfig(max_retries=3, retry_base_delay_s=0.0)
        gateway = LLMGateway(backend, config, sleep=lambda _: None)
        meter = CostMeter()
        completion = gateway.complete("interpreter", "p", 1.0, meter)
        assert completion.text == "OK"
        assert meter.llm_calls == 1
        assert meter.attempts == 3  # retries recorded separately

    def test_exhausted_retries_raise(self):
        backend = FlakyBackend(failures=10)
        config = RunConfig(max_retries=2, retry_base_delay_s=0.0)
        gateway = LLMGateway(backend, config, sleep=lambda _: None)
        meter = CostMeter()
        with pytest.raises(TransientBackendError):
            gateway.complete("interpreter", "p", 1.0, meter)
        assert meter.llm_calls == 0
        assert meter.attempts == 3

    def test_call_budget_enforced(self):
        backend = MockScriptBackend.from_responses(
            {"interpreter": ["x"]}, on_exhausted="repeat_last"
        )
        config = RunConfig(max_calls_per_question=2)
        gateway = LLMGateway(backend, config)
        meter = CostMeter()
        gateway.complete("interpreter", "p", 1.0, meter)
        gateway.complete("interpreter", "p", 1.0, meter)
        with pytest.raises(BudgetExceeded):
            gateway.complete("interpreter", "p", 1.0, meter)

    def test_token_budget_enforced(self):
        backend = MockScriptBackend.from_responses(
            {"interpreter": ["y" * 400]}, on_exhausted="repeat_last"
        )
        config = RunConfig(max_tokens_per_question=150)
        gateway = LLMGateway(backend, config)
        meter = CostMeter()
        gateway.complete("interpreter", "x" * 400, 1.0, meter)  # 100 + 100 tokens
        with pytest.raises(BudgetExceeded):
            gateway.complete("interpreter", "x" * 400, 1.0, meter)


class TestCache:
    def _gateway(self, tmp_path, responses):
        backend = MockScriptBackend.from_responses(responses)
        config = RunConfig(cache_enabled=True, cache_dir=str(tmp_path / "cache"))
        return LLMGateway(backend, config)

    def test_identical_prompt_served_from_cache(self, tmp_path):
        gateway = self._gateway(tmp_path, {"interpreter": ["first"]})
        meter = CostMeter()
        a = gateway.complete("interpreter", "same prompt", 1.0, meter)
        b = gateway.complete("interpreter", "same prompt", 1.0, meter)
        assert a == b
        assert meter.llm_calls == 1  # second call did not hit the backend
        assert meter.cache_hits == 1

    def test_temperature_is_part_of_the_key(self, tmp_path):
        gateway = self._gateway(tmp_path, {"interpreter": ["t1", "t0"]})
        meter = CostMeter()
        a = gateway.complete("interpreter", "same prompt", 1.0, meter)
        b = gateway.complete("interpreter", "same prompt", 0.0, meter)
        assert (a.text, b.text) == ("t1", "t0")
        assert meter.llm_calls == 2

    def test_cache_disabled_means_two_live_calls(self, tmp_path):
        backend = MockScriptBackend.from_responses({"interpreter": ["one", "two"]})
        config = RunConfig(cache_enabled=False)
        gateway = LLMGateway(backend, config)
        meter = CostMeter()
        assert gateway.complete("interpreter", "p", 1.0, meter).text == "one"
        assert gateway.complete("interpreter", "p", 1.0, meter).text == "two"
        assert meter.llm_calls == 2

    def test_corrupt_cache_entry_falls_through_to_live_call(self, tmp_path):
        cache_dir = tmp_path / "cache"
        gateway = self._gateway(tmp_path, {"interpreter": ["fresh"]})
        key = CompletionCache.key(gateway.backend.backend_id, "interpreter", "p", 1.0)
        cache_dir.mkdir(exist_ok=True)
        (cache_dir / f"{key}.json").write_text("{not json", encoding="utf-8")
        meter = CostMeter()
        completion = gateway.complete("interpreter", "p", 1.0, meter)
        assert completion.text == "fresh"
        assert meter.llm_calls == 1
        # entry was repaired on the way out
        assert CompletionCache(cache_dir).get(key) == completion


class TestConcurrency:
    def test_shared_gateway_with_cache_under_threads(self, tmp_path):
        class EchoBackend:
            backend_id = "echo"

            def send(self, role, prompt, temperature):
                return Completion(
                    text=f"reply:{prompt}",
                    tokens_in=mock_token_count(prompt),
                    tokens_out=1,
                    latency_ms=0,
                )

        config = RunConfig(cache_enabled=True, cache_dir=str(tmp_path / "cache"), max_inflight=4)
        gateway = LLMGateway(EchoBackend(), config)
        results = {}
        errors = []

        def worker(i):
            meter = CostMeter()
            try:
                prompts = [f"prompt {i}", "shared prompt", f"prompt {i}"]
                results[i] = [
                    gateway.complete("explorer", p, 1.0, meter).text for p in prompts
                ]
            except Exception as exc:  # noqa: BLE001
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        for i, texts in results.items():
            assert texts == [f"reply:prompt {i}", "reply:shared prompt", f"reply:prompt {i}"]


class _ChatHandler(BaseHTTPRequestHandler):
    calls: list[dict] = []
    fail_first = 0
    require_token = None

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).calls.append(
            {"body": body, "auth": self.headers.get("Authorization")}
        )
        if type(self).require_token and self.headers.get("Authorization") != f"Bearer {type(self).require_token}":
            self.send_response(401)
            self.end_headers()
            return
        if type(self).fail_first > 0:
            type(self).fail_first -= 1
            self.send_response(503)
            self.end_headers()
            return
        prompt = body["messages"][0]["content"]
        payload = {
            "choices": [{"message": {"content": f"echo:{prompt[:20]}"}}],
            "usage": {"prompt_tokens": 11, "completion_tokens": 7},
        }
        data = json.dumps(payload).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    _ChatHandler.calls = []
    _ChatHandler.fail_first = 0
    _ChatHandler.require_token = None
    server = HTTPServer(("127.0.0.1", 0), _ChatHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server, _ChatHandler
    server.shutdown()


class TestHTTPBackend:
    def _config(self, server, **kw):
        host, port = server.server_address
        return RunConfig(
            backend="http",
            base_url=f"http://{host}:{port}",
            chat_path="/v1/chat/completions",
            model="test-model",
            retry_base_delay_s=0.0,
            **kw,
        )

    def test_round_trip_with_provider_usage(self, chat_server):
        server, handler = chat_server
        backend = HTTPChatBackend(self._config(server))
        completion = backend.send("answerer", "hello world", 0.0)
        assert completion.text == "echo:hello world"
        assert (completion.tokens_in, completion.tokens_out) == (11, 7)
        assert handler.calls[0]["body"]["temperature"] == 0.0
        assert handler.calls[0]["body"]["messages"] == [
            {"role": "user", "content": "hello world"}
        ]

    def test_transient_503_then_success_via_gateway(self, chat_server):
        server, handler = chat_server
        handler.fail_first = 2
        config = self._config(server, max_retries=3)
        gateway = LLMGateway(HTTPChatBackend(config), config, sleep=lambda _: None)
        meter = CostMeter()
        completion = gateway.complete("answerer", "retry me", 0.0, meter)
        assert completion.text.startswith("echo:")
        assert meter.attempts == 3
        assert meter.llm_calls == 1

    def test_auth_header_from_env_and_401_maps_to_auth_error(self, chat_server, monkeypatch):
        server, handler = chat_server
        handler.require_token = "sekrit"
        config = self._config(server)
        backend = HTTPChatBackend(config)
        monkeypatch.delenv(config.auth_env, raising=False)
        with pytest.raises(AuthError):
            backend.send("answerer", "p", 0.0)
        monkeypatch.setenv(config.auth_env, "sekrit")
        assert backend.send("answerer", "p", 0.0).text.startswith("echo:")

    def test_arbiter_temperature_travels_exactly(self, chat_server):
        server, handler = chat_server
        config = self._config(server)
        gateway = LLMGateway(HTTPChatBackend(config), config)
        gateway.complete("answerer", "p", config.temp_arbiter, CostMeter())
        assert handler.calls[-1]["body"]["temperature"] == 0.0
