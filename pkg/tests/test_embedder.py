import json
import random
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import httpx
import numpy as np
import pytest

from semroute.as_profile import PromptSegment
from semroute.embedder import (
    DimMismatchError, Embedding, EmbeddingStore, EndpointConfig, FatalEmbeddingError,
    HttpProvider, MockProvider, RetryableEmbeddingError, embed_all, embed_as, http_embed,
    mock_embed, segments_from_dump,
)


def seg(asn, i, total, text):
    return PromptSegment(asn, i, total, text, "asdesc-v1")


def test_mock_deterministic_and_ranged():
    a = mock_embed("hello", 3, 1)
    assert a.shape == (3,)
    assert np.array_equal(a, mock_embed("hello", 3, 1))
    assert np.all(np.abs(a) <= 1)
    assert not np.array_equal(a, mock_embed("hello", 3, 2))


def test_mock_one_byte_change_moves_vector():
    rng = random.Random(3)
    for _ in range(1000):
        text = "".join(rng.choice("abcdefgh ") for _ in range(rng.randrange(1, 40)))
        i = rng.randrange(len(text))
        other = text[:i] + chr((ord(text[i]) + 1) % 128) + text[i + 1:]
        assert not np.array_equal(mock_embed(text, 8, 0), mock_embed(other, 8, 0))


def test_embed_as_is_mean():
    class Fixed:
        provider_id = "fixed"

        def embed(self, texts):
            return [np.array([0.0, 0.0]), np.array([2.0, 2.0])][: len(texts)]

    e = embed_as([seg(1, 1, 2, "a"), seg(1, 2, 2, "b")], Fixed())
    assert np.array_equal(e.vec, [1.0, 1.0])


def test_embed_as_linearity():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(7, 16))

    class Table:
        provider_id = "t"

        def embed(self, texts):
            return [vecs[int(t)] for t in texts]

    e = embed_as([seg(4, i + 1, 7, str(i)) for i in range(7)], Table())
    assert np.max(np.abs(e.vec - vecs.mean(axis=0))) <= 1e-12


def test_embed_as_single_segment_identity():
    p = MockProvider(5, 0)
    e = embed_as([seg(2, 1, 1, "x")], p)
    assert np.array_equal(e.vec, mock_embed("x", 5, 0))


def test_embed_as_rejects_mixed_asns():
    with pytest.raises(ValueError):
        embed_as([seg(1, 1, 2, "a"), seg(2, 2, 2, "b")], MockProvider(4))


def handler_transport(fn):
    calls = []

    def handle(request):
        body = json.loads(request.content)
        calls.append(body)
        return fn(body, len(calls))
    return httpx.MockTransport(handle), calls


def ok_response(body, dim=4, reverse=False):
    data = [{"index": i, "embedding": [float(i)] * dim} for i in range(len(body["input"]))]
    return httpx.Response(200, json={"data": data[::-1] if reverse else data})


def cfg(**kw):
    base = dict(base_url="http://embed.test/v1", model="m", backoff=0.01)
    base.update(kw)
    return EndpointConfig(**base)


def test_http_order_by_index_and_chunking():
    transport, calls = handler_transport(lambda b, n: ok_response(b, reverse=True))
    with httpx.Client(transport=transport) as client:
        out = http_embed([f"t{i}" for i in range(20)], cfg(), client)
    assert [len(c["input"]) for c in calls] == [16, 4]
    assert [v[0] for v in out] == [float(i) for i in range(16)] + [0.0, 1.0, 2.0, 3.0]
    assert calls[0]["model"] == "m"


def test_http_retries_then_succeeds():
    def fn(body, n):
        if n == 1:
            raise httpx.ReadTimeout("slow")
        if n == 2:
            return httpx.Response(503)
        if n == 3:
            return httpx.Response(429)
        return ok_response(body)

    transport, calls = handler_transport(fn)
    sleeps = []
    with httpx.Client(transport=transport) as client:
        out = http_embed(["a", "b"], cfg(retries=3), client, sleeps.append)
    assert len(out) == 2 and len(calls) == 4
    assert sleeps == [0.01, 0.02, 0.04]


def test_http_retries_exhausted():
    transport, calls = handler_transport(lambda b, n: httpx.Response(500))
    with httpx.Client(transport=transport) as client, pytest.raises(RetryableEmbeddingError):
        http_embed(["a"], cfg(retries=2), client, lambda s: None)
    assert len(calls) == 3


@pytest.mark.parametrize("response", [
    httpx.Response(400, text="bad request"),
    httpx.Response(200, text="not json"),
    httpx.Response(200, json={"data": [{"index": 0}]}),
    httpx.Response(200, json={"data": []}),
])
def test_http_fatal(response):
    transport, calls = handler_transport(lambda b, n: response)
    with httpx.Client(transport=transport) as client, pytest.raises(FatalEmbeddingError) as exc:
        http_embed(["a"], cfg(), client, lambda s: None)
    assert not exc.value.retryable
    assert len(calls) == 1


def test_http_dim_mismatch():
    transport, _ = handler_transport(lambda b, n: ok_response(b, dim=1024))
    with httpx.Client(transport=transport) as client, pytest.raises(DimMismatchError):
        http_embed(["a"], cfg(dim=768), client)


def test_http_bearer_token():
    seen = {}

    def handle(request):
        seen["auth"] = request.headers.get("authorization")
        return ok_response(json.loads(request.content))

    with httpx.Client(transport=httpx.MockTransport(handle)) as client:
        http_embed(["a"], cfg(api_key="sekret"), client)
    assert seen["auth"] == "Bearer sekret"


def test_endpoint_from_env(monkeypatch):
    monkeypatch.setenv("EMBED_ENDPOINT", "http://x/v1")
    monkeypatch.setenv("EMBED_MODEL", "bge")
    monkeypatch.delenv("EMBED_API_KEY", raising=False)
    c = EndpointConfig.from_env()
    assert (c.base_url, c.model, c.api_key, c.max_batch, c.timeout, c.retries) == \
        ("http://x/v1", "bge", None, 16, 30.0, 3)
    monkeypatch.delenv("EMBED_ENDPOINT")
    with pytest.raises(FatalEmbeddingError):
        EndpointConfig.from_env()


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        data = [{"index": i, "embedding": [len(t), 1.0, 2.0]} for i, t in enumerate(body["input"])]
        payload = json.dumps({"data": data}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


def test_http_provider_against_local_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        p = HttpProvider(cfg(base_url=f"http://127.0.0.1:{server.server_port}/v1", dim=3))
        e = embed_as([seg(7, 1, 2, "ab"), seg(7, 2, 2, "abcd")], p)
        assert np.array_equal(e.vec, [3.0, 1.0, 2.0])
        assert e.provider_id == "http:m"
    finally:
        server.shutdown()


def test_store_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    s = EmbeddingStore(6, "mock-d6-s0", "asdesc-v1", {"note": 1})
    for a in (5, 3, 9):
        s.put(a, rng.normal(size=6) * 1e-7 + rng.normal(size=6))
    s.save(tmp_path / "s.jsonl")
    t = EmbeddingStore.load(tmp_path / "s.jsonl")
    assert t.asns() == [3, 5, 9] and t.extra == {"note": 1}
    for a in s.asns():
        assert s[a].tobytes() == t[a].tobytes()
    header = json.loads((tmp_path / "s.jsonl").read_text().splitlines()[0])
    assert header["dim"] == 6 and header["provider_id"] == "mock-d6-s0"


def test_store_guards():
    s = EmbeddingStore(2, "p", "v")
    with pytest.raises(DimMismatchError):
        s.put(1, [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        s.put(1, [np.nan, 0.0])
    with pytest.raises(ValueError):
        s.add(Embedding(1, np.zeros(2), "v", "other"))


def test_new_as_touches_one_entry():
    p = MockProvider(8, 0)
    s = EmbeddingStore(8, p.provider_id, "asdesc-v1")
    embed_all({a: [seg(a, 1, 1, f"AS{a}")] for a in (1, 2, 3)}, p, s, jobs=1)
    before = {a: s[a].copy() for a in s.asns()}
    s.add(embed_as([seg(4, 1, 1, "AS4")], p))
    assert set(s.asns()) - set(before) == {4}
    assert all(np.array_equal(before[a], s[a]) for a in before)


def test_embed_all_isolates_failures():
    class Flaky:
        provider_id = "flaky"

        def embed(self, texts):
            if any("bad" in t for t in texts):
                raise RetryableEmbeddingError("boom")
            return [np.ones(2) for _ in texts]

    s = EmbeddingStore(2, "flaky")
    segs = {1: [seg(1, 1, 1, "ok")], 2: [seg(2, 1, 2, "ok"), seg(2, 2, 2, "bad")]}
    errors = embed_all(segs, Flaky(), s, jobs=2)
    assert s.asns() == [1] and list(errors) == [2]


def test_embed_all_parallel_equals_serial():
    p = MockProvider(4, 2)
    segs = {a: [seg(a, i + 1, 3, f"{a}-{i}") for i in range(3)] for a in range(30)}
    s1, s4 = EmbeddingStore(4, p.provider_id), EmbeddingStore(4, p.provider_id)
    embed_all(segs, p, s1, jobs=1)
    embed_all(segs, p, s4, jobs=4)
    assert all(np.array_equal(s1[a], s4[a]) for a in s1.asns())


def test_segments_from_dump_orders_segments():
    lines = [json.dumps({"asn": 1, "index": 2, "total": 2, "text": "b", "template_version": "v"}),
             json.dumps({"asn": 1, "index": 1, "total": 2, "text": "a", "template_version": "v"})]
    out = segments_from_dump(lines)
    assert [s.text for s in out[1]] == ["a", "b"] and out[1][0].template_version == "v"
