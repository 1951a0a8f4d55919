import random
import threading

import pytest

from planbudget.errors import ProtocolError, RequestError, ScriptExhaustedError, TransportError
from planbudget.gateway import (
    BackendConfig,
    GenerationRequest,
    MockBackend,
    OpenAICompatibleBackend,
    RetryPolicy,
    ScriptRule,
    mock_script,
    parse_chat_completion,
)

from conftest import completion


def make_client(server, sleeps=None, **kwargs):
    kwargs.setdefault("api_key", "sk-test")
    return OpenAICompatibleBackend(server.base_url, sleep=(sleeps.append if sleeps is not None else lambda s: None), seed=1, **kwargs)


def test_wire_shape_and_auth(stub_server):
    stub_server.replies.append((200, completion("hello", 12)))
    backend = make_client(stub_server)
    resp = backend.generate(GenerationRequest.user("my-model", "Say hi", request_id="q/run0/reason"))
    assert resp.text == "hello"
    assert resp.completion_tokens == 12
    assert resp.reasoning_tokens == 0
    (req,) = stub_server.requests
    assert req["path"] == "/v1/chat/completions"
    assert req["body"] == {"model": "my-model", "messages": [{"role": "user", "content": "Say hi"}], "max_tokens": 8192}
    assert req["headers"]["Authorization"] == "Bearer sk-test"
    backend.close()


def test_retry_then_succeed_on_429(stub_server):
    stub_server.replies += [(429, {"error": "slow down"}), (429, {"error": "slow down"}), (200, completion("ok", 3, reasoning=2))]
    sleeps = []
    backend = make_client(stub_server, sleeps)
    resp = backend.generate(GenerationRequest.user("m", "x"))
    assert resp.attempts == 3
    assert resp.reasoning_tokens == 2
    assert len(stub_server.requests) == 3
    # 1s then 2s, each within +/-20% jitter
    assert len(sleeps) == 2
    assert 0.8 <= sleeps[0] <= 1.2 and 1.6 <= sleeps[1] <= 2.4
    assert backend.billed_tokens == 3


def test_gives_up_after_max_attempts(stub_server):
    stub_server.replies += [(503, {})] * 3
    backend = make_client(stub_server, retry=RetryPolicy(max_attempts=3))
    with pytest.raises(TransportError):
        backend.generate(GenerationRequest.user("m", "x"))
    assert len(stub_server.requests) == 3
    assert backend.billed_tokens == 0


def test_client_error_is_not_retried(stub_server):
    stub_server.replies.append((400, {"error": "bad"}))
    backend = make_client(stub_server)
    with pytest.raises(RequestError) as exc:
        backend.generate(GenerationRequest.user("m", "x"))
    assert exc.value.status == 400
    assert len(stub_server.requests) == 1


def test_non_json_body_is_protocol_error(stub_server):
    stub_server.replies.append((200, b"<html>oops</html>"))
    with pytest.raises(ProtocolError):
        make_client(stub_server).generate(GenerationRequest.user("m", "x"))


def test_missing_key_sends_no_auth_header(stub_server, monkeypatch):
    monkeypatch.delenv("PB_TEST_KEY", raising=False)
    backend = OpenAICompatibleBackend(stub_server.base_url, api_key_env="PB_TEST_KEY")
    backend.generate(GenerationRequest.user("m", "x", max_tokens=None, temperature=0.0))
    req = stub_server.requests[0]
    assert "Authorization" not in req["headers"]
    assert "max_tokens" not in req["body"]
    assert req["body"]["temperature"] == 0.0


def test_unreachable_host_retries_then_raises():
    backend = OpenAICompatibleBackend("http://127.0.0.1:9", api_key="k", retry=RetryPolicy(max_attempts=2), sleep=lambda s: None)
    with pytest.raises(TransportError):
        backend.generate(GenerationRequest.user("m", "x"))


@pytest.mark.parametrize(
    "body",
    [{}, {"choices": []}, {"choices": [{"message": {"content": 5}}]}, {"choices": [{"message": {"content": "x"}}], "usage": {"completion_tokens": "many"}}],
)
def test_parse_chat_completion_malformed(body):
    with pytest.raises(ProtocolError):
        parse_chat_completion(body)


def test_parse_chat_completion_finish_mapping():
    body = completion(None, 4, finish="max_tokens")
    r = parse_chat_completion(body)
    assert (r.text, r.finish_reason) == ("", "length")


def test_retry_policy_delays():
    p = RetryPolicy()
    rng = random.Random(0)
    for attempt, nominal in [(1, 1), (2, 2), (3, 4), (4, 8)]:
        d = p.delay(attempt, rng)
        assert nominal * 0.8 <= d <= nominal * 1.2


def test_mock_matchers_and_transcript():
    backend = mock_script(
        [
            ("Decomposed", "1. a\n2. b", 7),
            (lambda r: "credits" in r.prompt, '{"1": {"credit": 50}, "2": {"credit": 50}}', 9),
            (None, "fallback answer"),
        ]
    )
    r1 = backend.generate(GenerationRequest.user("m", "Decomposed Sub-questions:"))
    r2 = backend.generate(GenerationRequest.user("m", "assign credits"))
    r3 = backend.generate(GenerationRequest.user("m", "anything"))
    assert (r1.completion_tokens, r2.completion_tokens, r3.completion_tokens) == (7, 9, 2)
    assert backend.billed_tokens == 18
    assert backend.prompts == ["Decomposed Sub-questions:", "assign credits", "anything"]
    with pytest.raises(ScriptExhaustedError):
        backend.generate(GenerationRequest.user("m", "more"))


def test_mock_positional_and_repeat():
    backend = MockBackend([ScriptRule("second", 1, matcher=1), ScriptRule("any", 1, repeat=True)])
    texts = [backend.generate(GenerationRequest.user("m", "p")).text for _ in range(4)]
    assert texts == ["any", "second", "any", "any"]


def test_mock_scripted_failures_count_attempts():
    backend = MockBackend([ScriptRule("ok", 5, fail=2)])
    resp = backend.generate(GenerationRequest.user("m", "x"))
    assert resp.attempts == 3
    assert backend.last_attempts == 3
    assert backend.billed_tokens == 5
    assert len(backend.transcript) == 1


def test_mock_truncates_to_cutoff():
    backend = MockBackend([ScriptRule("long", 10_000)])
    resp = backend.generate(GenerationRequest.user("m", "x"))
    assert resp.completion_tokens == 8192
    assert resp.finish_reason == "length"


def test_mock_is_thread_safe():
    backend = MockBackend([ScriptRule("x", 3, repeat=True)], concurrency=8)
    threads = [threading.Thread(target=lambda: [backend.generate(GenerationRequest.user("m", "p")) for _ in range(50)]) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert backend.calls == 400
    assert backend.billed_tokens == 1200


def test_request_validation():
    with pytest.raises(ValueError):
        GenerationRequest("m", ())
    with pytest.raises(ValueError):
        GenerationRequest.user("m", "x", max_tokens=0)


def test_backend_config():
    cfg = BackendConfig.from_dict({"kind": "mock", "script": [{"response": "hi", "tokens": 2, "contains": "x"}]})
    backend = cfg.build()
    assert isinstance(backend, MockBackend)
    assert backend.generate(GenerationRequest.user("m", "xyz")).completion_tokens == 2
    assert isinstance(BackendConfig(base_url="http://h/v1").build(), OpenAICompatibleBackend)
    with pytest.raises(ValueError):
        BackendConfig.from_dict({"flavour": "x"})
    with pytest.raises(ValueError):
        BackendConfig(kind="smoke").build()
