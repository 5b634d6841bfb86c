from __future__ import annotations

import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, strategies as st

from benchforge.gateway import (
    ChatRequest,
    ChatResponse,
    ContractViolation,
    Gateway,
    HttpBackend,
    InsufficientDataError,
    Message,
    MockBackend,
    TransportError,
    UsageLedger,
    canonical_text,
    count_tokens,
    loglog_slope,
    parse_json_reply,
    report_usage,
    trigram_embed,
)


def fnv1a_32(data: bytes) -> int:
    """Reference FNV-1a over raw bytes."""
    h = 0x811C9DC5
    for b in data:
        h = ((h ^ b) * 0x01000193) % 2**32
    return h


def oracle_embed(text: str, dim: int = 256) -> np.ndarray:
    padded = " " + " ".join(text.lower().split()) + " "
    out = np.zeros(dim)
    for i in range(len(padded) - 2):
        out[fnv1a_32(padded[i:i + 3].encode("utf-32-le")) % dim] += 1
    return out / np.linalg.norm(out)


# [TRIVIAL] published FNV-1a test vectors
def test_fnv_reference_vectors():
    assert fnv1a_32(b"") == 0x811C9DC5
    assert fnv1a_32(b"a") == 0xE40C292C
    assert fnv1a_32(b"foobar") == 0xBF9CF968


# [DERIVED] embedding equals an independent byte-level FNV implementation
@pytest.mark.parametrize("text", ["Graph Neural Network", "  transformer\tmodels ", "héllo wörld", "ab"])
def test_trigram_embed_matches_oracle(text):
    np.testing.assert_allclose(trigram_embed(text), oracle_embed(text), atol=1e-12)


@given(st.text(min_size=1, max_size=60).filter(lambda s: s.strip()))
def test_trigram_embed_unit_norm(text):
    v = trigram_embed(text)
    assert v.shape == (256,)
    assert math.isclose(float(np.linalg.norm(v)), 1.0, rel_tol=1e-9)


def test_embed_empty_rejected():
    with pytest.raises(ContractViolation):
        trigram_embed("   ")
    with pytest.raises(ContractViolation):
        Gateway(MockBackend()).embed("")


def test_count_tokens_and_canonical_text():
    assert count_tokens("") == 0
    assert count_tokens("abcd") == 1
    assert count_tokens("abcde") == 2
    assert canonical_text("  A  b\nC ") == "a b c"


def test_request_validation():
    with pytest.raises(ContractViolation):
        ChatRequest(()).validate()
    with pytest.raises(ContractViolation):
        ChatRequest((Message("robot", "x"),)).validate()
    with pytest.raises(ContractViolation):
        ChatRequest((Message("user", ""),)).validate()
    with pytest.raises(ContractViolation):
        ChatRequest.build("s", "u", "t", temperature=-1).validate()
    with pytest.raises(ContractViolation):
        ChatRequest.build("s", "u", "t", max_tokens=0).validate()
    req = ChatRequest.build("sys", "hello", "qa:SingleHop:P1")
    req.validate()
    assert req.stage == "qa" and req.last_user_text == "hello"
    assert ChatRequest.build("s", "u", "").stage == "untagged"


def test_mock_resolution_order():
    backend = MockBackend(
        script={"qa:x:1": "scripted", "qa:x:2": {"a": 1}},
        responders={"qa:": lambda r: "short", "qa:x:": lambda r: "long"},
    )
    reply = lambda tag: backend.chat(ChatRequest.build("s", "user text", tag)).text  # noqa: E731
    assert reply("qa:x:1") == "scripted"
    assert reply("qa:x:2") == '{"a": 1}'
    assert reply("qa:x:9") == "long"
    assert reply("qa:y") == "short"
    assert reply("other") == "user text"


# [DERIVED] mock latency is 1 + total_tokens // 50
def test_mock_token_accounting():
    req = ChatRequest.build("s" * 40, "u" * 400, "other")
    resp = MockBackend().chat(req)
    assert resp.prompt_tokens == 10 + 100
    assert resp.completion_tokens == 100
    assert resp.latency_ms == 1 + 210 // 50


def test_gateway_records_usage():
    gw = Gateway(MockBackend())
    gw.complete(ChatRequest.build("s", "abcd", "extract:d1"))
    gw.complete(ChatRequest.build("s", "abcd", "extract:d2"))
    assert gw.ledger.total_calls("extract") == 2
    assert gw.ledger.total_calls() == 2
    data = gw.ledger.to_dict()
    assert UsageLedger.from_dict(data).to_dict() == data


class _FlakyBackend:
    name = "flaky"
    max_attempts = 3
    backoff_base = 0.5

    def __init__(self, failures: int) -> None:
        self.failures = failures
        self.calls = 0

    def chat(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransportError("boom")
        return ChatResponse("ok", 1, 1, 1)

    def embed(self, text):
        raise TransportError("no embeddings")


def test_gateway_retries_with_exponential_backoff():
    sleeps = []
    backend = _FlakyBackend(failures=2)
    gw = Gateway(backend, sleep=sleeps.append)
    assert gw.complete(ChatRequest.build("s", "u", "qa:1")).text == "ok"
    assert sleeps == [0.5, 1.0]
    counters = gw.ledger.stages["qa"]
    assert (counters.attempts, counters.failures, counters.calls) == (3, 2, 1)


def test_gateway_gives_up():
    sleeps = []
    gw = Gateway(_FlakyBackend(failures=10), sleep=sleeps.append)
    with pytest.raises(TransportError, match="gave up after 3 attempts"):
        gw.complete(ChatRequest.build("s", "u", "qa:1"))
    assert sleeps == [0.5, 1.0]
    with pytest.raises(TransportError):
        gw.embed("text")


class _Handler(BaseHTTPRequestHandler):
    status = 401
    hits: list = []

    def do_POST(self):  # noqa: N802
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        type(self).hits.append((self.path, self.headers.get("Authorization"), body))
        if type(self).status != 200:
            self.send_response(type(self).status)
            self.end_headers()
            return
        if self.path.endswith("/embeddings"):
            payload = {"data": [{"embedding": [3.0, 4.0]}]}
        else:
            payload = {"choices": [{"message": {"content": "pong"}}],
                       "usage": {"prompt_tokens": 7, "completion_tokens": 2}}
        raw = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    _Handler.hits = []
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server, f"http://127.0.0.1:{server.server_port}/v1"
    server.shutdown()
    server.server_close()


def test_http_unauthorized_is_retried_then_fails(stub_server):
    _, url = stub_server
    _Handler.status = 401
    sleeps = []
    backend = HttpBackend(url, "secret", "m", max_attempts=3, timeout=5)
    gw = Gateway(backend, sleep=sleeps.append)
    with pytest.raises(TransportError):
        gw.complete(ChatRequest.build("s", "ping", "qa:1"))
    assert len(_Handler.hits) == 3
    assert sleeps == [0.5, 1.0]
    assert gw.ledger.stages["qa"].failures == 3


def test_http_success_payloads(stub_server):
    _, url = stub_server
    _Handler.status = 200
    backend = HttpBackend(url, "secret", "chat-m", embed_model="emb-m", timeout=5)
    resp = Gateway(backend).complete(ChatRequest.build("s", "ping", "qa:1"))
    assert resp.text == "pong" and resp.prompt_tokens == 7 and resp.completion_tokens == 2
    path, auth, body = _Handler.hits[0]
    assert path == "/v1/chat/completions" and auth == "Bearer secret"
    assert body["model"] == "chat-m" and body["messages"][1] == {"role": "user", "content": "ping"}
    np.testing.assert_allclose(backend.embed("x"), [0.6, 0.8])


def test_http_connection_refused():
    backend = HttpBackend("http://127.0.0.1:9", "k", "m", max_attempts=1, timeout=1)
    with pytest.raises(TransportError):
        backend.chat(ChatRequest.build("s", "u", "t"))


# [DERIVED] slope of an exact power law
def test_loglog_slope():
    x = [10, 100, 1000, 10000]
    assert loglog_slope(x, [3 * v**1.5 for v in x]) == pytest.approx(1.5, abs=1e-12)
    with pytest.raises(InsufficientDataError):
        loglog_slope([5, 5], [1, 2])


def test_report_usage():
    ledger = UsageLedger()
    with pytest.raises(InsufficientDataError):
        report_usage(ledger)
    for i, chars in enumerate((1000, 2000, 4000)):
        ledger.record_document(f"d{i}", chars, chars // 4, 0)
    rep = report_usage(ledger)
    assert rep.token_slope == pytest.approx(1.0)
    assert rep.latency_slope is None


def test_parse_json_reply():
    assert parse_json_reply('```json\n{"a": 1}\n```') == {"a": 1}
    assert parse_json_reply(' [1, 2] ') == [1, 2]
    with pytest.raises(ValueError):
        parse_json_reply("not json")
