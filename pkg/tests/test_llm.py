import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import pytest

from hive_retrieval import prompts
from hive_retrieval.errors import (
    AuthenticationError,
    ConfigError,
    MalformedResponseError,
    OracleError,
    RateLimitError,
    TransportError,
)
from hive_retrieval.ingestion import QrelsTable
from hive_retrieval.llm import (
    BoundedProvider,
    CachedProvider,
    ChatRequest,
    ChatResponse,
    MockOracleProvider,
    OpenAICompatibleProvider,
    OracleState,
    ResponseCache,
    cache_key,
    cached_complete,
    complete,
    mock_oracle,
)

CHAT_OK = {"choices": [{"message": {"role": "assistant", "content": "hello"}}]}


class StubHandler(BaseHTTPRequestHandler):
    """Answers the first ``fail`` POSTs with ``status``, then 200."""

    fail = 3
    status = 429
    calls: list = []

    def do_POST(self):  # noqa: N802
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).calls.append((self.path, self.headers.get("Authorization"), body))
        if len(type(self).calls) <= type(self).fail:
            code, payload = type(self).status, {"error": "slow down"}
        else:
            code, payload = 200, CHAT_OK
        raw = json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    StubHandler.calls = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/v1"
    server.shutdown()
    server.server_close()


def test_retries_429_three_times_then_succeeds(stub_server):
    sleeps = []
    provider = OpenAICompatibleProvider(model="m", base_url=stub_server, api_key="k", sleep=sleeps.append)
    resp = complete(provider, ChatRequest("m", "sys", "user"))
    assert resp.text == "hello"
    assert resp.retries == 3
    assert sleeps == [1.0, 2.0, 4.0]
    path, auth, body = StubHandler.calls[-1]
    assert path == "/v1/chat/completions"
    assert auth == "Bearer k"
    assert body["temperature"] == 0 and body["max_tokens"] == 1024
    assert body["messages"] == [{"role": "system", "content": "sys"}, {"role": "user", "content": "user"}]


def test_rate_limit_after_retries_exhausted(stub_server):
    provider = OpenAICompatibleProvider(base_url=stub_server, api_key="k", max_retries=2, sleep=lambda s: None)
    with pytest.raises(RateLimitError):
        provider.complete(ChatRequest("m", "s", "u"))
    assert len(StubHandler.calls) == 3


def test_missing_credential_fails_before_network(monkeypatch):
    monkeypatch.delenv("HIVE_TEST_KEY", raising=False)
    calls = []
    transport = httpx.MockTransport(lambda r: calls.append(r) or httpx.Response(200, json=CHAT_OK))
    with pytest.raises(AuthenticationError) as info:
        OpenAICompatibleProvider(api_key_env="HIVE_TEST_KEY", transport=transport)
    assert isinstance(info.value, ConfigError)
    assert info.value.exit_code == 2
    assert "HIVE_TEST_KEY" in str(info.value)
    assert calls == []


def _provider(handler, **kw):
    return OpenAICompatibleProvider(api_key="k", transport=httpx.MockTransport(handler), sleep=lambda s: None, **kw)


def test_credential_from_environment(monkeypatch):
    monkeypatch.setenv("HIVE_TEST_KEY", "secret")
    seen = []

    def handler(request):
        seen.append(request.headers["authorization"])
        return httpx.Response(200, json=CHAT_OK)

    p = OpenAICompatibleProvider(api_key_env="HIVE_TEST_KEY", transport=httpx.MockTransport(handler))
    p.complete(ChatRequest("m", "s", "u"))
    assert seen == ["Bearer secret"]


def test_error_kinds_are_distinguished():
    with pytest.raises(AuthenticationError):
        _provider(lambda r: httpx.Response(401)).complete(ChatRequest("m", "s", "u"))
    with pytest.raises(MalformedResponseError):
        _provider(lambda r: httpx.Response(200, json={"nope": 1})).complete(ChatRequest("m", "s", "u"))
    with pytest.raises(MalformedResponseError):
        _provider(lambda r: httpx.Response(200, content=b"<html>")).complete(ChatRequest("m", "s", "u"))

    def broken(request):
        raise httpx.ConnectError("refused")

    with pytest.raises(TransportError):
        _provider(broken, max_retries=1).complete(ChatRequest("m", "s", "u"))


def test_transport_errors_are_retried():
    attempts = []

    def flaky(request):
        attempts.append(1)
        if len(attempts) < 3:
            raise httpx.ReadTimeout("slow")
        return httpx.Response(200, json=CHAT_OK)

    resp = _provider(flaky).complete(ChatRequest("m", "s", "u"))
    assert resp.text == "hello" and resp.retries == 2


def test_null_content_is_empty_text():
    payload = {"choices": [{"message": {"content": None}}]}
    assert _provider(lambda r: httpx.Response(200, json=payload)).complete(ChatRequest("m", "s", "u")).text == ""


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("m", "s", "u", temperature=-0.1)
    with pytest.raises(ValueError):
        ChatRequest("m", "s", "u", max_output_tokens=0)


@pytest.fixture
def oracle_state():
    queries = {
        "q1": {"text": "why does my LED not light", "caption": "breadboard with resistor",
               "gap_terms": ["voltage", "divider"]},
    }
    return OracleState(queries, QrelsTable({("q1", "d2"): 1, ("q1", "d5"): 2}))


def _hyp_request(docs=None):
    text = prompts.build_hypothesis_prompt("why does my LED not light", "breadboard with resistor",
                                           docs or [prompts.Document("d1", "irrelevant")])
    return ChatRequest("m", prompts.system_text(prompts.HYPOTHESIS), text)


def _verify_request(ids, k_f=10, query=("why does my LED not light", "breadboard with resistor")):
    docs = [prompts.Document(d, f"text of {d}") for d in ids]
    return ChatRequest("m", "s", prompts.build_verify_prompt(*query, docs, k_f))


def test_mock_hypothesis_contains_gap_terms(oracle_state):
    text = mock_oracle(_hyp_request(), oracle_state)
    assert "voltage divider" in text
    assert prompts.parse_compensatory_query(text) == "voltage divider"


def test_mock_verify_orders_by_grade_then_id(oracle_state):
    text = mock_oracle(_verify_request(["d1", "d2"]), oracle_state)
    assert prompts.parse_ranked_list(text, {"d1", "d2"}, 10) == ["d2", "d1"]
    text = mock_oracle(_verify_request(["d9", "d1", "d5", "d2", "d3"], k_f=3), oracle_state)
    assert prompts.parse_ranked_list(text, {"d1", "d2", "d3", "d5", "d9"}, 10) == ["d5", "d2", "d1"]


def test_mock_verify_without_relevant_candidates(oracle_state):
    text = mock_oracle(_verify_request(["d7", "d3", "d4"]), oracle_state)
    assert prompts.parse_ranked_list(text, {"d3", "d4", "d7"}, 10) == ["d3", "d4", "d7"]


def test_mock_rejects_unmarked_or_unknown(oracle_state):
    with pytest.raises(OracleError):
        mock_oracle(ChatRequest("m", "s", "plain text, no marker"), oracle_state)
    with pytest.raises(OracleError):
        mock_oracle(ChatRequest("m", "s", "[[hive:summarize v=x q=abc]]\n"), oracle_state)
    unknown = prompts.build_hypothesis_prompt("other", "", [prompts.Document("d1", "x")])
    with pytest.raises(OracleError):
        mock_oracle(ChatRequest("m", "s", unknown), oracle_state)


def test_mock_is_pure(oracle_state):
    provider = MockOracleProvider(oracle_state)
    req = _verify_request(["d1", "d2", "d5"])
    assert provider.complete(req).text == provider.complete(req).text


def test_noisy_mock_is_seeded(oracle_state):
    ids = [f"d{i}" for i in range(10)]
    req = _verify_request(ids)
    a = MockOracleProvider(oracle_state, noise=0.5, seed=1)
    b = MockOracleProvider(oracle_state, noise=0.5, seed=1)
    clean = MockOracleProvider(oracle_state).complete(req).text
    assert a.complete(req).text == b.complete(req).text
    assert a.complete(req).text != clean
    assert a.provider_id != MockOracleProvider(oracle_state).provider_id


def test_oracle_state_json_round_trip(oracle_state, tmp_path):
    path = tmp_path / "o.json"
    path.write_text(json.dumps(oracle_state.to_json()))
    loaded = OracleState.load(path)
    assert loaded.queries == oracle_state.queries and loaded.qrels == oracle_state.qrels


class CountingProvider:
    provider_id = "counting-stub"

    def __init__(self):
        self.calls = 0

    def complete(self, request):
        self.calls += 1
        return ChatResponse(f"answer {self.calls}", self.provider_id)


def test_cache_hit_skips_provider(tmp_path):
    cache, stub = ResponseCache(tmp_path), CountingProvider()
    req = ChatRequest("m", "s", "u")
    first = cached_complete(cache, stub, req)
    second = cached_complete(cache, stub, req)
    assert (first.cached, second.cached) == (False, True)
    assert second.text == first.text == "answer 1"
    assert stub.calls == 1


def test_cache_key_sensitivity(tmp_path):
    base = ChatRequest("m", "s", "u")
    keys = {
        cache_key("p", base),
        cache_key("p2", base),
        cache_key("p", ChatRequest("m2", "s", "u")),
        cache_key("p", ChatRequest("m", "s", "u", temperature=0.2)),
        cache_key("p", ChatRequest("m", "s2", "u")),
        cache_key("p", ChatRequest("m", "s", "u2")),
    }
    assert len(keys) == 6
    assert cache_key("p", base) == cache_key("p", ChatRequest("m", "s", "u"))
    cache, stub = ResponseCache(tmp_path), CountingProvider()
    cached_complete(cache, stub, base)
    cached_complete(cache, stub, ChatRequest("m", "s", "u", temperature=0.2))
    assert stub.calls == 2 and len(list(tmp_path.glob("*.json"))) == 2


def test_cache_deleted_or_corrupt_entry_is_a_miss(tmp_path, caplog):
    cache, stub = ResponseCache(tmp_path), CountingProvider()
    req = ChatRequest("m", "s", "u")
    cached_complete(cache, stub, req)
    path = cache.path_for(cache_key(stub.provider_id, req))
    path.unlink()
    assert cached_complete(cache, stub, req).cached is False
    assert path.exists() and stub.calls == 2
    path.write_text("{truncated")
    assert cached_complete(cache, stub, req).cached is False
    assert "corrupt" in caplog.text
    assert stub.calls == 3
    entry = json.loads(path.read_text())
    assert entry["request"]["user_text"] == "u" and entry["response"]["text"] == "answer 3"


def test_cached_and_bounded_wrappers(tmp_path):
    stub = CountingProvider()
    provider = BoundedProvider(CachedProvider(stub, ResponseCache(tmp_path)), max_inflight=2)
    req = ChatRequest("m", "s", "u")
    assert [provider.complete(req).cached for _ in range(3)] == [False, True, True]
    assert stub.calls == 1
    assert provider.provider_id == "counting-stub"


def test_bounded_provider_limits_concurrency():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}
    gate = threading.Event()

    class Slow:
        provider_id = "slow"

        def complete(self, request):
            with lock:
                state["now"] += 1
                state["peak"] = max(state["peak"], state["now"])
            gate.wait(0.05)
            with lock:
                state["now"] -= 1
            return ChatResponse("x", "slow")

    bounded = BoundedProvider(Slow(), max_inflight=2)
    threads = [threading.Thread(target=bounded.complete, args=(ChatRequest("m", "s", str(i)),)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert state["peak"] <= 2
