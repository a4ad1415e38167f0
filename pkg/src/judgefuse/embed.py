"""Client for an OpenAI-style ``/v1/embeddings`` service with an on-disk cache."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import struct
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from judgefuse._io import atomic_write_bytes
from judgefuse.core import JudgefuseError
from judgefuse.datapipe import DialogueRecord, EmbeddingStore

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"MTDC"


class EmbedError(JudgefuseError):
    pass


class PermanentHTTPError(EmbedError):
    def __init__(self, status: int, record_ids: Sequence[str], body: str = ""):
        super().__init__(f"HTTP {status} for records {', '.join(record_ids[:10])}: {body[:200]}")
        self.status = status
        self.record_ids = list(record_ids)


class RetriesExhaustedError(EmbedError):
    def __init__(self, attempts: list[str], record_ids: Sequence[str]):
        log = "; ".join(attempts)
        super().__init__(f"gave up after {len(attempts)} attempts for records {', '.join(record_ids[:10])}: {log}")
        self.attempts = attempts
        self.record_ids = list(record_ids)


class EmbeddingDimensionError(EmbedError):
    pass


@dataclass(frozen=True)
class EmbedEndpointConfig:
    base_url: str
    model_name: str
    api_key_env: str = "EMBED_API_KEY"
    timeout_ms: int = 30_000
    max_retries: int = 4
    max_in_flight: int = 4
    cache_dir: str | None = None
    batch_size: int = 16
    backoff_base_ms: float = 250.0
    backoff_factor: float = 2.0

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.max_retries < 0 or self.batch_size < 1:
            raise ValueError("max_retries must be >= 0 and batch_size >= 1")

    @property
    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env) or None


def render_dialogue(record: DialogueRecord | Sequence[tuple[str, str]]) -> str:
    """Canonical text fed to the encoder: one ``Speaker: text`` line per turn.

    Accepts a record or a bare sequence of ``(speaker, text)`` turns.
    """
    turns = record.turns if isinstance(record, DialogueRecord) else record
    return "\n".join(f"{speaker}: {text}" for speaker, text in turns)


def cache_key(model_name: str, text: str) -> str:
    blob = json.dumps([model_name, text], ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


class EmbeddingCache:
    """One file per key: magic, model name, dim, f32 vector, CRC32."""

    def __init__(self, root: str | Path | None):
        self.root = Path(root) if root is not None else None
        self._lock = threading.Lock()

    def path(self, key: str) -> Path:
        return self.root / key

    def get(self, key: str) -> np.ndarray | None:
        if self.root is None:
            return None
        path = self.path(key)
        try:
            buf = path.read_bytes()
        except FileNotFoundError:
            return None
        try:
            return self._decode(buf)
        except (ValueError, struct.error) as exc:
            logger.warning("ignoring corrupt cache entry %s: %s", path.name, exc)
            return None

    def put(self, key: str, vector: np.ndarray, model_name: str) -> None:
        if self.root is None:
            return
        name = model_name.encode("utf-8")
        vec = np.ascontiguousarray(vector, dtype="<f4")
        body = CACHE_MAGIC + struct.pack("<H", len(name)) + name + struct.pack("<I", vec.size) + vec.tobytes()
        body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        with self._lock:
            atomic_write_bytes(self.path(key), body)

    @staticmethod
    def _decode(buf: bytes) -> np.ndarray:
        if buf[:4] != CACHE_MAGIC:
            raise ValueError("bad magic")
        (crc,) = struct.unpack("<I", buf[-4:])
        if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
            raise ValueError("CRC mismatch")
        (n,) = struct.unpack_from("<H", buf, 4)
        pos = 6 + n
        (dim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + 4 * dim != len(buf) - 4:
            raise ValueError("length mismatch")
        return np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float32)


@dataclass
class FetchStats:
    requested: int = 0
    cache_hits: int = 0
    network_calls: int = 0
    attempts: list[str] = field(default_factory=list)
    peak_in_flight: int = 0

    @property
    def hit_ratio(self) -> float:
        return self.cache_hits / self.requested if self.requested else 1.0


class EmbeddingFetcher:
    """Fetches, caches and assembles embeddings for dialogue records.

    ``transport`` and ``sleep`` exist for tests (``httpx.MockTransport`` and
    a no-op sleeper).
    """

    def __init__(
        self,
        config: EmbedEndpointConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        jitter_seed: int | None = None,
    ):
        self.config = config
        self.cache = EmbeddingCache(config.cache_dir)
        self.stats = FetchStats()
        self._transport = transport
        self._sleep = sleep
        self._jitter = random.Random(jitter_seed)
        self._lock = threading.Lock()
        self._in_flight = 0

    def _client(self) -> httpx.Client:
        headers = {"Content-Type": "application/json"}
        key = self.config.api_key
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return httpx.Client(
            base_url=self.config.base_url.rstrip("/"),
            timeout=self.config.timeout_ms / 1000.0,
            headers=headers,
            transport=self._transport,
        )

    def _delay(self, attempt: int) -> float:
        base = self.config.backoff_base_ms / 1000.0 * self.config.backoff_factor ** (attempt - 1)
        with self._lock:
            return base * (0.5 + self._jitter.random())

    def _post(self, client: httpx.Client, texts: list[str], record_ids: list[str]) -> list[tuple[list[float], str]]:
        attempts: list[str] = []
        payload = {"model": self.config.model_name, "input": texts}
        for attempt in range(1, self.config.max_retries + 2):
            with self._lock:
                self._in_flight += 1
                self.stats.peak_in_flight = max(self.stats.peak_in_flight, self._in_flight)
                self.stats.network_calls += 1
            try:
                resp = client.post("/v1/embeddings", json=payload)
            except httpx.TransportError as exc:
                attempts.append(f"attempt {attempt}: {type(exc).__name__}: {exc}")
                resp = None
            finally:
                with self._lock:
                    self._in_flight -= 1
            if resp is not None:
                if resp.status_code == 200:
                    with self._lock:
                        self.stats.attempts.extend(attempts + [f"attempt {attempt}: 200"])
                    return self._parse(resp, len(texts), record_ids)
                attempts.append(f"attempt {attempt}: HTTP {resp.status_code}")
                if resp.status_code != 429 and resp.status_code < 500:
                    raise PermanentHTTPError(resp.status_code, record_ids, resp.text)
            if attempt <= self.config.max_retries:
                self._sleep(self._delay(attempt))
        with self._lock:
            self.stats.attempts.extend(attempts)
        raise RetriesExhaustedError(attempts, record_ids)

    def _parse(self, resp: httpx.Response, n: int, record_ids) -> list[tuple[list[float], str]]:
        try:
            body = resp.json()
            data = sorted(body["data"], key=lambda d: d["index"])
            vectors = [d["embedding"] for d in data]
        except (ValueError, KeyError, TypeError) as exc:
            raise EmbedError(f"malformed embeddings response for {record_ids[:5]}: {exc}") from None
        if len(vectors) != n:
            raise EmbedError(f"asked for {n} embeddings, got {len(vectors)}")
        model = str(body.get("model") or self.config.model_name)
        return [(v, model) for v in vectors]

    def fetch(self, records: Sequence[DialogueRecord]) -> EmbeddingStore:
        texts = [render_dialogue(r) for r in records]
        keys = [cache_key(self.config.model_name, t) for t in texts]
        vectors: dict[int, np.ndarray] = {}
        missing: dict[str, list[int]] = {}
        for k, key in enumerate(keys):
            hit = self.cache.get(key)
            self.stats.requested += 1
            if hit is not None:
                self.stats.cache_hits += 1
                vectors[k] = hit
            else:
                missing.setdefault(key, []).append(k)

        todo = list(missing)
        batches = [todo[i : i + self.config.batch_size] for i in range(0, len(todo), self.config.batch_size)]
        if batches:
            with self._client() as client, ThreadPoolExecutor(self.config.max_in_flight) as pool:
                def run(batch_keys):
                    first = [missing[key][0] for key in batch_keys]
                    got = self._post(client, [texts[k] for k in first], [records[k].id for k in first])
                    for key, (vec, model) in zip(batch_keys, got):
                        arr = np.asarray(vec, dtype=np.float32)
                        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                            raise EmbedError(f"bad vector for record {records[missing[key][0]].id!r}")
                        self.cache.put(key, arr, model)
                        for k in missing[key]:
                            vectors[k] = arr

                for future in [pool.submit(run, b) for b in batches]:
                    future.result()

        dims = {v.shape[0] for v in vectors.values()}
        if len(dims) > 1:
            raise EmbeddingDimensionError(f"embedding dimensions disagree across responses: {sorted(dims)}")
        dim = dims.pop() if dims else 0
        ids = [r.id for r in records]
        matrix = np.stack([vectors[k] for k in range(len(records))]) if records else np.zeros((0, dim), np.float32)
        return EmbeddingStore(ids, matrix, dim)


def fetch_embeddings(config: EmbedEndpointConfig, records: Sequence[DialogueRecord], **kwargs) -> EmbeddingStore:
    return EmbeddingFetcher(config, **kwargs).fetch(records)
