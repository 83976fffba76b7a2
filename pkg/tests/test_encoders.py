import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, strategies as st

from caselink.encoders import (
    EmbeddingStore,
    EncoderError,
    LlmBackendConfig,
    LlmClient,
    LlmRequestError,
    ToyHashEncoder,
    encode_texts,
    summarize,
)


class TestEmbeddingStore:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        vectors = {f"id{i}": rng.standard_normal(16) for i in range(20)}
        vectors["tiny"] = np.full(16, 1e-300)
        store = EmbeddingStore(dim=16, vectors=vectors)
        path = tmp_path / "emb.jsonl"
        store.save(path)
        loaded = EmbeddingStore.load(path)
        assert loaded.dim == 16
        for key, vec in vectors.items():
            assert np.array_equal(loaded.get(key), vec)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(EncoderError, match="shape"):
            EmbeddingStore(dim=4, vectors={"a": np.zeros(3)})

    def test_nan_rejected(self):
        with pytest.raises(EncoderError, match="NaN"):
            EmbeddingStore(dim=2, vectors={"a": np.array([1.0, np.nan])})

    def test_missing_id_names_it(self):
        store = EmbeddingStore(dim=2, vectors={"a": np.ones(2)})
        with pytest.raises(EncoderError, match="missing-one"):
            store.get("missing-one")


class TestToyHash:
    def test_deterministic(self):
        enc = ToyHashEncoder(32)
        assert np.array_equal(enc.encode("the court held"), enc.encode("the court held"))

    def test_unit_norm(self):
        enc = ToyHashEncoder(64)
        for text in ("one", "a b c d e", "repeated repeated repeated"):
            assert np.linalg.norm(enc.encode(text)) == pytest.approx(1.0, abs=1e-9)

    def test_tokenless_text_hits_bias_bucket(self):
        enc = ToyHashEncoder(8)
        vec = enc.encode("!!! ...")
        expected = np.zeros(8)
        expected[0] = 1.0
        assert np.array_equal(vec, expected)

    def test_disjoint_vocabularies_are_orthogonal(self):
        """Brute-force the bucket assignments, then check exact cosine 0."""
        enc = ToyHashEncoder(512)
        vocab_a = ["alpha", "bravo", "charlie", "delta"]
        vocab_b = ["echo", "foxtrot", "golf", "hotel"]
        buckets_a = {enc.bucket(t) for t in vocab_a}
        buckets_b = {enc.bucket(t) for t in vocab_b}
        assert not buckets_a & buckets_b, "fixture collision; pick other tokens"
        va = enc.encode(" ".join(vocab_a))
        vb = enc.encode(" ".join(vocab_b))
        assert float(va @ vb) == 0.0

    def test_counts_land_in_hashed_buckets(self):
        enc = ToyHashEncoder(64)
        vec = enc.encode("word word other")
        expected = np.zeros(64)
        expected[enc.bucket("word")] += 2
        expected[enc.bucket("other")] += 1
        expected /= np.linalg.norm(expected)
        assert np.allclose(vec, expected)

    @given(st.text(max_size=120))
    def test_never_the_zero_vector(self, text):
        vec = ToyHashEncoder(16).encode(text)
        assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-9)
        assert np.all(np.isfinite(vec))


class TestEncodeTexts:
    def test_toy_hash_store(self):
        store = encode_texts("toy-hash", [("a", "x y"), ("b", "z")], dim=16)
        assert store.dim == 16 and len(store) == 2

    def test_identical_texts_identical_vectors(self):
        store = encode_texts("toy-hash", [("a", "same text"), ("b", "same text")], dim=16)
        assert np.array_equal(store.get("a"), store.get("b"))

    def test_empty_list_rejected(self):
        with pytest.raises(EncoderError, match="no texts"):
            encode_texts("toy-hash", [])

    def test_unknown_encoder(self):
        with pytest.raises(EncoderError, match="unknown encoder"):
            encode_texts("bert", [("a", "x")])

    def test_external_file_roundtrip_and_missing_id(self, tmp_path):
        src = EmbeddingStore(dim=4, vectors={"a": np.arange(4.0)})
        src.save(tmp_path / "ext.jsonl")
        store = encode_texts("external-file", [("a", "ignored")],
                             external_path=tmp_path / "ext.jsonl")
        assert np.array_equal(store.get("a"), np.arange(4.0))
        with pytest.raises(EncoderError, match="b"):
            encode_texts("external-file", [("b", "x")],
                         external_path=tmp_path / "ext.jsonl")

    def test_external_file_dim_mismatch(self, tmp_path):
        EmbeddingStore(dim=4, vectors={"a": np.arange(4.0)}).save(tmp_path / "e.jsonl")
        with pytest.raises(EncoderError, match="dim 4, expected 8"):
            encode_texts("external-file", [("a", "x")], dim=8,
                         external_path=tmp_path / "e.jsonl")


class TestMockSummarize:
    def test_truncates_to_word_limit(self):
        text = " ".join(f"w{i}" for i in range(80))
        out = summarize(LlmBackendConfig(mode="mock"), text, word_limit=50)
        assert out.split() == text.split()[:50]

    def test_short_text_passes_through(self):
        out = summarize(LlmBackendConfig(mode="mock"), "only four words here", 50)
        assert out == "only four words here"

    def test_deterministic(self):
        cfg = LlmBackendConfig(mode="mock")
        assert summarize(cfg, "a b c", 2) == summarize(cfg, "a b c", 2)

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            summarize(LlmBackendConfig(mode="mock"), "   ", 50)

    def test_cache_file_written_and_reused(self, tmp_path):
        cfg = LlmBackendConfig(mode="mock", cache_dir=tmp_path / "cache")
        client = LlmClient(cfg)
        first = client.summarize("alpha beta gamma", 2)
        cached = list((tmp_path / "cache").glob("*.txt"))
        assert len(cached) == 1
        cached[0].write_text("from-cache")  # prove the cache is authoritative
        assert client.summarize("alpha beta gamma", 2) == "from-cache"
        assert first == "alpha beta"


class _StubHandler(BaseHTTPRequestHandler):
    completion = "stub summary text"
    status = 200
    calls = 0

    def do_POST(self):
        type(self).calls += 1
        body = self.rfile.read(int(self.headers["Content-Length"]))
        json.loads(body)  # must be valid chat-completions JSON
        self.send_response(self.status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        payload = {"choices": [{"message": {"content": self.completion}}]}
        self.wfile.write(json.dumps(payload).encode())

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _StubHandler.calls = 0
    _StubHandler.status = 200
    yield f"http://127.0.0.1:{server.server_port}/v1/chat/completions"
    server.shutdown()


class TestRemoteSummarize:
    def test_stub_completion_then_cache_hit(self, stub_server, tmp_path, monkeypatch):
        monkeypatch.setenv("CASELINK_API_KEY", "test-key")
        cfg = LlmBackendConfig(endpoint=stub_server, mode="remote",
                               cache_dir=tmp_path / "cache", max_retries=2)
        client = LlmClient(cfg)
        assert client.summarize("some case text", 50) == "stub summary text"
        assert client.request_count == 1
        # repeat: served from cache, zero further network calls
        assert client.summarize("some case text", 50) == "stub summary text"
        assert client.request_count == 1
        assert _StubHandler.calls == 1

    def test_http_error_carries_status_after_retries(self, stub_server, monkeypatch):
        monkeypatch.setenv("CASELINK_API_KEY", "test-key")
        _StubHandler.status = 500
        cfg = LlmBackendConfig(endpoint=stub_server, mode="remote", max_retries=3)
        client = LlmClient(cfg)
        with pytest.raises(LlmRequestError) as err:
            client.summarize("text", 50)
        assert err.value.status == 500
        assert client.request_count == 3

    def test_remote_requires_credentials(self, monkeypatch):
        monkeypatch.delenv("CASELINK_API_KEY", raising=False)
        with pytest.raises(LlmRequestError, match="CASELINK_API_KEY"):
            LlmClient(LlmBackendConfig(endpoint="http://x", mode="remote"))

    def test_summarize_many_parallel(self, stub_server, monkeypatch, tmp_path):
        monkeypatch.setenv("CASELINK_API_KEY", "test-key")
        cfg = LlmBackendConfig(endpoint=stub_server, mode="remote",
                               cache_dir=tmp_path / "c", request_parallelism=3)
        client = LlmClient(cfg)
        out = client.summarize_many([(f"id{i}", f"text {i}") for i in range(6)], 50)
        assert set(out.values()) == {"stub summary text"}
        assert client.request_count == 6
