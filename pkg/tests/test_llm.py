import json
import math
import threading
import time

import httpx
import pytest

from kgsynth.llm import (JUDGE_PARAMS, Cassette, CassetteMiss, CompletionResult, GenerationParams, HTTPBackend,
                         LLMClient, LLMTimeoutError, ModelEndpoint, ProtocolError, RecordingBackend, ReplayBackend,
                         RequestError, RetryPolicy, build_request_body, parse_response, record_replay_key)
from conftest import make_client
from fakellm import FlakyBackend, ScriptedBackend

MSGS = [("system", "be brief"), ("user", "hello")]


def test_key_deterministic_and_sensitive():
    p = GenerationParams()
    assert record_replay_key(MSGS, p) == record_replay_key(list(MSGS), GenerationParams())
    assert record_replay_key(MSGS, p) != record_replay_key(MSGS, p.with_(temperature=1.0))
    assert record_replay_key(MSGS, p) != record_replay_key(MSGS[::-1], p)
    assert record_replay_key(MSGS, p) != record_replay_key(MSGS, p.with_(seed=1))
    assert record_replay_key(MSGS, p) != record_replay_key([("system", "be brief"), ("user", "hello!")], p)


def test_key_is_stable_value():
    # frozen so a silent change to the hashing scheme invalidates cassettes loudly
    key = record_replay_key([("user", "ping")], GenerationParams())
    assert key == record_replay_key([("user", "ping")], GenerationParams())
    assert len(key) == 64


def test_params_validation():
    with pytest.raises(ValueError):
        GenerationParams(logprobs=False, top_logprobs=5)
    with pytest.raises(ValueError):
        GenerationParams(top_p=0)
    assert JUDGE_PARAMS.max_tokens == 1 and JUDGE_PARAMS.top_logprobs == 5 and JUDGE_PARAMS.logprobs


def test_synthesizer_defaults():
    p = GenerationParams()
    assert (p.top_k, p.top_p, p.repetition_penalty, p.max_tokens, p.temperature) == (50, 0.95, 1.05, 10240, 0.0)


def test_replay_returns_recorded_response(tmp_path):
    cassette = Cassette(tmp_path / "c.jsonl")
    recorded = CompletionResult("exact text é", (("yes", -0.1),), (3, 1))
    rec = make_client(RecordingBackend(ScriptedBackend([recorded]), cassette))
    assert rec.complete(MSGS).text == "exact text é"
    replay = make_client(ReplayBackend(Cassette(tmp_path / "c.jsonl")))
    assert replay.complete(MSGS) == recorded
    with pytest.raises(CassetteMiss):
        replay.complete([("user", "never recorded")])


def test_cassette_line_format(tmp_path):
    cassette = Cassette(tmp_path / "c.jsonl")
    RecordingBackend(ScriptedBackend(["hi"]), cassette).send(None, MSGS, GenerationParams())
    line = json.loads((tmp_path / "c.jsonl").read_text().splitlines()[0])
    assert set(line) == {"key", "request", "response"}
    assert line["key"] == record_replay_key(MSGS, GenerationParams())


def test_retry_then_success():
    delays = []
    backend = FlakyBackend(2)
    client = LLMClient(ModelEndpoint("http://x", "m"), backend, retry=RetryPolicy(5, 0.5, 2.0, 0.2),
                       sleep=delays.append)
    assert client.complete(MSGS).text == "ok"
    assert backend.attempts == 3
    assert len(delays) == 2
    assert delays[0] >= 0.5 * 0.8 and delays[1] >= 1.0 * 0.8
    assert delays[1] > delays[0]


def test_retry_budget_exhausted():
    client = LLMClient(ModelEndpoint("http://x", "m"), FlakyBackend(10), retry=RetryPolicy(3), sleep=lambda s: None)
    with pytest.raises(LLMTimeoutError):
        client.complete(MSGS)


def test_non_retryable_error_surfaces_immediately():
    backend = ScriptedBackend([RequestError(400, "bad request")])
    with pytest.raises(RequestError) as info:
        make_client(backend).complete(MSGS)
    assert info.value.status == 400
    assert len(backend.requests) == 1


def test_concurrency_cap():
    class Slow:
        def send(self, endpoint, messages, params):
            time.sleep(0.01)
            return CompletionResult(messages[-1][1])

    client = LLMClient(ModelEndpoint("http://x", "m"), Slow(), concurrency=3)
    results = {}

    def worker(i):
        results[i] = client.complete([("user", str(i))]).text

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert client.stats.peak_in_flight <= 3
    assert results == {i: str(i) for i in range(20)}


def _openai_payload(tops):
    return {
        "choices": [{"message": {"role": "assistant", "content": "Yes"},
                     "logprobs": {"content": [{"token": "Yes", "logprob": -0.1,
                                               "top_logprobs": [{"token": t, "logprob": lp} for t, lp in tops]}]}}],
        "usage": {"prompt_tokens": 12, "completion_tokens": 1},
    }


def test_parse_response_truncates_top_logprobs():
    tops = [(f"t{i}", -float(i)) for i in range(8)]
    res = parse_response(_openai_payload(tops), JUDGE_PARAMS)
    assert len(res.first_token_top_logprobs) == 5
    assert all(lp <= 0 for _, lp in res.first_token_top_logprobs)
    assert res.usage == (12, 1)


def test_parse_response_malformed():
    with pytest.raises(ProtocolError):
        parse_response({"nope": []}, GenerationParams())


def test_request_body_shape():
    body = build_request_body(ModelEndpoint("http://x", "m"), MSGS, JUDGE_PARAMS)
    assert body["logprobs"] is True and body["top_logprobs"] == 5 and body["max_tokens"] == 1
    assert body["messages"][0] == {"role": "system", "content": "be brief"}


def test_http_backend_roundtrip(monkeypatch):
    monkeypatch.setenv("SYNTHESIZER_API_KEY", "secret")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json=_openai_payload([("yes", math.log(0.9)), ("no", math.log(0.05))]))

    backend = HTTPBackend(client=httpx.Client(transport=httpx.MockTransport(handler)))
    res = make_client(backend).complete(MSGS, JUDGE_PARAMS)
    assert seen["auth"] == "Bearer secret"
    assert seen["body"]["model"] == "fake-model"
    assert res.first_token_top_logprobs[0][0] == "yes"
    assert math.isclose(math.exp(res.first_token_top_logprobs[0][1]), 0.9)


def test_http_backend_status_mapping(monkeypatch):
    monkeypatch.setenv("SYNTHESIZER_API_KEY", "secret")
    codes = iter([429, 503, 200])

    def handler(request):
        code = next(codes)
        if code == 200:
            return httpx.Response(200, json=_openai_payload([]))
        return httpx.Response(code, text="busy")

    backend = HTTPBackend(client=httpx.Client(transport=httpx.MockTransport(handler)))
    client = make_client(backend)
    assert client.complete(MSGS).text == "Yes"
    assert client.stats.attempts == 3

    backend = HTTPBackend(client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(401, text="no"))))
    with pytest.raises(RequestError):
        make_client(backend).complete(MSGS)

    backend = HTTPBackend(client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, text="{"))))
    with pytest.raises(ProtocolError):
        make_client(backend).complete(MSGS)


def test_missing_api_key(monkeypatch):
    monkeypatch.delenv("SYNTHESIZER_API_KEY", raising=False)
    backend = HTTPBackend(client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200))))
    with pytest.raises(Exception, match="SYNTHESIZER_API_KEY"):
        make_client(backend).complete(MSGS)


def test_empty_messages_rejected():
    with pytest.raises(ValueError):
        make_client(ScriptedBackend([])).complete([])
