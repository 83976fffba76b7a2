"""Text encoders, the embedding store, and the summarization LLM client.

All initial node feature vectors live in an EmbeddingStore (JSON Lines with a
dim header). Two encoders are provided: a deterministic token-hashing encoder
good enough for desk-scale experiments, and a pass-through for embeddings
precomputed by an external model. The LLM client speaks the ubiquitous
chat-completions JSON shape and supports a fully offline mock mode; every
response is cached on disk so summaries behave as immutable artifacts.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import tokenize

DEFAULT_PROMPT_TEMPLATE = (
    "Summarize the following legal case in {word_limit} words:\n\n{text}"
)


class EncoderError(Exception):
    """Raised for unknown encoders, missing vectors, or shape mismatches."""


@dataclass(frozen=True)
class EmbeddingStore:
    """Immutable id -> vector map with a single shared dimensionality."""

    dim: int
    vectors: dict[str, np.ndarray]

    def __post_init__(self):
        seen: set[str] = set()
        for key, vec in self.vectors.items():
            if key in seen:
                raise EncoderError(f"duplicate embedding id {key!r}")
            seen.add(key)
            if vec.shape != (self.dim,):
                raise EncoderError(
                    f"embedding {key!r} has shape {vec.shape}, expected ({self.dim},)"
                )
            if not np.all(np.isfinite(vec)):
                raise EncoderError(f"embedding {key!r} contains NaN/Inf")

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, key: str) -> bool:
        return key in self.vectors

    def get(self, key: str) -> np.ndarray:
        try:
            return self.vectors[key]
        except KeyError:
            raise EncoderError(f"no embedding for id {key!r}") from None

    def ids(self) -> list[str]:
        return sorted(self.vectors)

    def matrix(self, ids: list[str]) -> np.ndarray:
        return np.stack([self.get(i) for i in ids])

    def save(self, path: str | Path) -> None:
        """JSON Lines: a {"dim": d} header, then one {"id", "vector"} per row."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            f.write(json.dumps({"dim": self.dim}) + "\n")
            for key in sorted(self.vectors):
                row = {"id": key, "vector": [float(x) for x in self.vectors[key]]}
                f.write(json.dumps(row) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise EncoderError(f"empty embedding store: {path}")
        header = json.loads(lines[0])
        dim = int(header["dim"])
        vectors = {}
        for line in lines[1:]:
            if not line.strip():
                continue
            row = json.loads(line)
            vectors[row["id"]] = np.asarray(row["vector"], dtype=np.float64)
        return cls(dim=dim, vectors=vectors)


def _stable_bucket(token: str, n_buckets: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % n_buckets


class ToyHashEncoder:
    """Deterministic bag-of-tokens feature hashing, L2-normalized.

    Tokens hash into buckets 1..dim-1; bucket 0 is a bias bucket used only
    when the text has no tokens at all, so no non-empty input ever maps to
    the zero vector. Texts with disjoint vocabularies and no bucket
    collisions are exactly orthogonal.
    """

    def __init__(self, dim: int = 64):
        if dim < 2:
            raise EncoderError("toy-hash needs dim >= 2")
        self.dim = dim

    def bucket(self, token: str) -> int:
        return 1 + _stable_bucket(token, self.dim - 1)

    def encode(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        tokens = tokenize(text)
        if not tokens:
            vec[0] = 1.0
            return vec
        for token in tokens:
            vec[self.bucket(token)] += 1.0
        return vec / np.linalg.norm(vec)


def encode_texts(encoder_id: str, texts: list[tuple[str, str]], *,
                 dim: int | None = None,
                 external_path: str | Path | None = None) -> EmbeddingStore:
    """Build an EmbeddingStore for (id, text) pairs.

    "toy-hash" encodes locally (dim defaults to 64); "external-file" pulls
    vectors verbatim from a user-supplied store (the hook for pretrained
    legal encoders, which are not part of this artifact) and, when a dim is
    requested, rejects a store of any other width.
    """
    if not texts:
        raise EncoderError("no texts to encode")
    if encoder_id == "toy-hash":
        enc = ToyHashEncoder(64 if dim is None else dim)
        return EmbeddingStore(dim=enc.dim, vectors={i: enc.encode(t) for i, t in texts})
    if encoder_id == "external-file":
        if external_path is None:
            raise EncoderError("external-file encoder needs external_path")
        store = EmbeddingStore.load(external_path)
        if dim is not None and store.dim != dim:
            raise EncoderError(
                f"external store has dim {store.dim}, expected {dim}"
            )
        vectors = {i: store.get(i) for i, _ in texts}  # raises naming missing id
        return EmbeddingStore(dim=store.dim, vectors=vectors)
    raise EncoderError(f"unknown encoder {encoder_id!r}")


@dataclass(frozen=True)
class LlmBackendConfig:
    endpoint: str = ""
    model_name: str = "mock-summarizer"
    mode: str = "mock"  # "remote" | "mock"
    max_retries: int = 3
    timeout: float = 30.0
    request_parallelism: int = 4
    cache_dir: str | Path | None = None
    api_key_env: str = "CASELINK_API_KEY"
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE

    def __post_init__(self):
        if self.mode not in ("remote", "mock"):
            raise ValueError(f"unknown LLM mode {self.mode!r}")
        if self.mode == "remote" and not self.endpoint:
            raise ValueError("remote mode requires an endpoint")


class LlmRequestError(Exception):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class LlmClient:
    """Chat-completion summarizer with an on-disk cache.

    Cache entries are keyed by (model, mode, word limit, prompt template,
    text hash): once a summary exists it is never re-requested, which keeps
    LLM output stable across reruns and provider deprecations.
    """

    def __init__(self, config: LlmBackendConfig):
        self.config = config
        self.request_count = 0
        self._lock = threading.Lock()
        if config.mode == "remote" and not os.environ.get(config.api_key_env):
            raise LlmRequestError(
                f"remote mode requires credentials in ${config.api_key_env}"
            )

    def _cache_path(self, text: str, word_limit: int) -> Path | None:
        if self.config.cache_dir is None:
            return None
        c = self.config
        key = hashlib.sha256(
            "\x1f".join(
                [c.model_name, c.mode, str(word_limit), c.prompt_template,
                 hashlib.sha256(text.encode("utf-8")).hexdigest()]
            ).encode("utf-8")
        ).hexdigest()
        return Path(c.cache_dir) / f"{key}.txt"

    def summarize(self, text: str, word_limit: int = 50) -> str:
        if not text.strip():
            raise ValueError("cannot summarize empty text")
        cache_path = self._cache_path(text, word_limit)
        if cache_path is not None and cache_path.is_file():
            return cache_path.read_text(encoding="utf-8")

        if self.config.mode == "mock":
            summary = " ".join(text.split()[:word_limit])
        else:
            summary = self._remote_summarize(text, word_limit)

        if cache_path is not None:
            with self._lock:
                cache_path.parent.mkdir(parents=True, exist_ok=True)
                tmp = cache_path.with_suffix(".tmp")
                tmp.write_text(summary, encoding="utf-8")
                tmp.replace(cache_path)
        return summary

    def summarize_many(self, items: list[tuple[str, str]],
                       word_limit: int = 50) -> dict[str, str]:
        """Summarize (id, text) pairs, bounded-parallel in remote mode."""
        if self.config.mode == "remote" and self.config.request_parallelism > 1:
            with ThreadPoolExecutor(self.config.request_parallelism) as pool:
                results = pool.map(lambda it: (it[0], self.summarize(it[1], word_limit)), items)
                return dict(results)
        return {key: self.summarize(text, word_limit) for key, text in items}

    def _remote_summarize(self, text: str, word_limit: int) -> str:
        import requests

        payload = {
            "model": self.config.model_name,
            "messages": [
                {
                    "role": "user",
                    "content": self.config.prompt_template.format(
                        word_limit=word_limit, text=text
                    ),
                }
            ],
        }
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        last_status: int | None = None
        last_error = "no attempts made"
        for attempt in range(self.config.max_retries):
            with self._lock:
                self.request_count += 1
            try:
                resp = requests.post(
                    self.config.endpoint, json=payload, headers=headers,
                    timeout=self.config.timeout,
                )
                last_status = resp.status_code
                if resp.status_code == 200:
                    content = resp.json()["choices"][0]["message"]["content"]
                    if not content.strip():
                        raise LlmRequestError("empty completion", status=200)
                    return content
                last_error = f"HTTP {resp.status_code}"
            except LlmRequestError:
                raise
            except Exception as exc:  # connection errors, malformed JSON
                last_error = str(exc)
            if attempt + 1 < self.config.max_retries:
                time.sleep(min(0.1 * 2 ** attempt, 2.0))
        raise LlmRequestError(
            f"summarization failed after {self.config.max_retries} attempts: {last_error}",
            status=last_status,
        )


def summarize(backend: LlmBackendConfig, text: str, word_limit: int = 50) -> str:
    """One-shot convenience wrapper around LlmClient."""
    return LlmClient(backend).summarize(text, word_limit)
