import hashlib
import json
import threading
import time

import httpx
import numpy as np
import pytest

from judgefuse.datapipe import DialogueRecord
from judgefuse.embed import (
    EmbedEndpointConfig,
    EmbeddingDimensionError,
    EmbeddingFetcher,
    PermanentHTTPError,
    RetriesExhaustedError,
    cache_key,
    fetch_embeddings,
    render_dialogue,
)


def dialogue(k: int) -> DialogueRecord:
    return DialogueRecord(
        f"d{k}",
        (("Human", f"question {k}"), ("Assistant", f"answer {k}"), ("Human", "thanks"), ("Assistant", "welcome")),
    )


def vector_for(text: str, dim: int = 4) -> list[float]:
    seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")
    return np.random.default_rng(seed).normal(size=dim).round(6).tolist()


class FakeServer:
    """Scripted embeddings endpoint that records what it saw."""

    def __init__(self, dim=4, script=(), delay=0.0):
        self.dim = dim
        self.script = list(script)  # status codes to return before succeeding
        self.delay = delay
        self.calls = 0
        self.in_flight = 0
        self.peak = 0
        self.lock = threading.Lock()
        self.bodies = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        with self.lock:
            self.calls += 1
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
            status = self.script.pop(0) if self.script else 200
        try:
            if self.delay:
                time.sleep(self.delay)
            if status != 200:
                return httpx.Response(status, text="nope")
            body = json.loads(request.content)
            self.bodies.append(body)
            data = [{"index": i, "embedding": vector_for(t, self.dim)} for i, t in enumerate(body["input"])]
            return httpx.Response(200, json={"data": data, "model": body["model"]})
        finally:
            with self.lock:
                self.in_flight -= 1


def config(tmp_path, **kw):
    base = dict(base_url="http://embed.test", model_name="enc-1", cache_dir=str(tmp_path / "cache"), backoff_base_ms=1)
    base.update(kw)
    return EmbedEndpointConfig(**base)


def fetcher(cfg, server):
    return EmbeddingFetcher(cfg, transport=httpx.MockTransport(server), sleep=lambda s: None, jitter_seed=0)


# --- rendering and keys ---------------------------------------------------------


def test_render_one_exchange():
    assert render_dialogue([("Human", "hi"), ("Assistant", "hello")]) == "Human: hi\nAssistant: hello"


def test_render_record_is_stable_and_injective():
    assert render_dialogue(dialogue(1)) == render_dialogue(dialogue(1))
    assert render_dialogue(dialogue(1)) != render_dialogue(dialogue(2))
    assert render_dialogue([("Human", "a"), ("Assistant", "b c")]) != render_dialogue([("Human", "a b"), ("Assistant", "c")])


def test_cache_key_is_sha256_of_model_and_text():
    want = hashlib.sha256(json.dumps(["enc-1", "Human: hi"], separators=(",", ":")).encode()).hexdigest()
    assert cache_key("enc-1", "Human: hi") == want
    assert cache_key("enc-2", "Human: hi") != want


# --- fetching -------------------------------------------------------------------------


def test_mock_vectors_land_in_store(tmp_path):
    server = FakeServer(dim=4)
    records = [dialogue(k) for k in range(5)]
    store = fetcher(config(tmp_path), server).fetch(records)
    assert store.dim == 4 and store.ids == tuple(r.id for r in records)
    for r in records:
        assert np.allclose(store.vector(r.id), vector_for(render_dialogue(r)), atol=1e-6)
    assert server.bodies[0]["model"] == "enc-1"


def test_fully_cached_corpus_makes_no_calls(tmp_path):
    records = [dialogue(k) for k in range(6)]
    first = fetcher(config(tmp_path), FakeServer()).fetch(records)
    server = FakeServer()
    f = fetcher(config(tmp_path), server)
    second = f.fetch(records)
    assert server.calls == 0 and f.stats.network_calls == 0
    assert f.stats.hit_ratio == 1.0
    assert second.to_bytes() == first.to_bytes()


def test_fails_twice_then_succeeds(tmp_path):
    server = FakeServer(script=[503, 429])
    f = fetcher(config(tmp_path, batch_size=16), server)
    store = f.fetch([dialogue(0), dialogue(1)])
    assert len(store) == 2
    assert server.calls == 3
    assert len(f.stats.attempts) == 3


def test_client_error_is_permanent(tmp_path):
    server = FakeServer(script=[400])
    with pytest.raises(PermanentHTTPError) as err:
        fetcher(config(tmp_path), server).fetch([dialogue(0)])
    assert err.value.status == 400 and err.value.record_ids == ["d0"]
    assert server.calls == 1


def test_retries_exhaust(tmp_path):
    server = FakeServer(script=[500] * 10)
    with pytest.raises(RetriesExhaustedError) as err:
        fetcher(config(tmp_path, max_retries=2), server).fetch([dialogue(3)])
    assert server.calls == 3 and len(err.value.attempts) == 3 and "d3" in str(err.value)


def test_unreachable_endpoint(tmp_path):
    def refuse(request):
        raise httpx.ConnectError("connection refused", request=request)

    f = EmbeddingFetcher(config(tmp_path, max_retries=1), transport=httpx.MockTransport(refuse), sleep=lambda s: None)
    with pytest.raises(RetriesExhaustedError, match="ConnectError"):
        f.fetch([dialogue(0)])


def test_concurrency_is_bounded(tmp_path):
    server = FakeServer(delay=0.02)
    f = fetcher(config(tmp_path, batch_size=1, max_in_flight=3), server)
    f.fetch([dialogue(k) for k in range(24)])
    assert server.calls == 24
    assert server.peak <= 3 and f.stats.peak_in_flight <= 3
    assert server.peak >= 2  # the pool really does overlap requests


def test_dimension_disagreement(tmp_path):
    fetcher(config(tmp_path), FakeServer(dim=4)).fetch([dialogue(0)])
    with pytest.raises(EmbeddingDimensionError):
        fetcher(config(tmp_path), FakeServer(dim=5)).fetch([dialogue(0), dialogue(1)])


def test_corrupt_cache_entry_is_refetched(tmp_path):
    cfg = config(tmp_path)
    fetcher(cfg, FakeServer()).fetch([dialogue(0)])
    entry = tmp_path / "cache" / cache_key("enc-1", render_dialogue(dialogue(0)))
    raw = bytearray(entry.read_bytes())
    raw[-6] ^= 0xFF
    entry.write_bytes(bytes(raw))
    server = FakeServer()
    store = fetcher(cfg, server).fetch([dialogue(0)])
    assert server.calls == 1
    assert np.allclose(store.vector("d0"), vector_for(render_dialogue(dialogue(0))), atol=1e-6)


def test_duplicate_texts_are_requested_once(tmp_path):
    server = FakeServer()
    twin = DialogueRecord("twin", dialogue(0).turns)
    store = fetch_embeddings(
        config(tmp_path), [dialogue(0), twin], transport=httpx.MockTransport(server), sleep=lambda s: None
    )
    assert sum(len(b["input"]) for b in server.bodies) == 1
    assert np.array_equal(store.vector("d0"), store.vector("twin"))


def test_api_key_header(tmp_path, monkeypatch):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        body = json.loads(request.content)
        return httpx.Response(200, json={"data": [{"index": 0, "embedding": [1.0, 2.0]}], "model": body["model"]})

    monkeypatch.setenv("EMBED_TEST_KEY", "sekret")
    cfg = config(tmp_path, api_key_env="EMBED_TEST_KEY", cache_dir=None)
    EmbeddingFetcher(cfg, transport=httpx.MockTransport(handler)).fetch([dialogue(0)])
    assert seen["auth"] == "Bearer sekret"
