"""Segment embeddings averaged into one vector per AS, behind a small
provider interface (deterministic mock, or an HTTP embeddings endpoint).
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import httpx
import numpy as np

from .as_profile import PromptSegment

log = logging.getLogger(__name__)


class EmbeddingError(RuntimeError):
    """Base class for provider failures."""

    retryable = False


class RetryableEmbeddingError(EmbeddingError):
    retryable = True


class FatalEmbeddingError(EmbeddingError):
    pass


class DimMismatchError(FatalEmbeddingError):
    pass


def _text_key(text: str, seed: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little", signed=True))
    h.update(text.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def mock_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Uniform [-1, 1] draws from a Philox stream keyed by a hash of (seed, text)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.Generator(np.random.Philox(key=_text_key(text, seed)))
    return rng.uniform(-1.0, 1.0, dim)


class MockProvider:
    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.provider_id = f"mock-d{dim}-s{seed}"

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [mock_embed(t, self.dim, self.seed) for t in texts]


@dataclass
class EndpointConfig:
    base_url: str
    model: str = "default"
    api_key: Optional[str] = None
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    max_batch: int = 16
    dim: Optional[int] = None

    @classmethod
    def from_env(cls, **overrides) -> "EndpointConfig":
        base = overrides.pop("base_url", None) or os.environ.get("EMBED_ENDPOINT")
        if not base:
            raise FatalEmbeddingError("EMBED_ENDPOINT is not set")
        model = overrides.pop("model", None) or os.environ.get("EMBED_MODEL", "default")
        key = overrides.pop("api_key", None) or os.environ.get("EMBED_API_KEY")
        return cls(base_url=base, model=model, api_key=key, **overrides)


def http_embed(
    texts: Sequence[str],
    cfg: EndpointConfig,
    client: Optional[httpx.Client] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[np.ndarray]:
    """POST ``texts`` to ``<base>/embeddings`` in chunks of ``cfg.max_batch``."""
    own = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    try:
        out: list[np.ndarray] = []
        for i in range(0, len(texts), cfg.max_batch):
            out.extend(_post_batch(list(texts[i:i + cfg.max_batch]), cfg, client, sleep))
        return out
    finally:
        if own:
            client.close()


def _post_batch(texts, cfg, client, sleep):
    url = cfg.base_url.rstrip("/") + "/embeddings"
    headers = {"Authorization": f"Bearer {cfg.api_key}"} if cfg.api_key else {}
    attempt = 0
    while True:
        try:
            return _request_once(client, url, headers, texts, cfg)
        except RetryableEmbeddingError as exc:
            if attempt >= cfg.retries:
                raise
            delay = cfg.backoff * (2**attempt)
            attempt += 1
            log.warning("embedding request failed (%s); retry %d/%d in %.2fs",
                        exc, attempt, cfg.retries, delay)
            sleep(delay)


def _request_once(client, url, headers, texts, cfg):
    try:
        resp = client.post(url, json={"model": cfg.model, "input": texts},
                           headers=headers, timeout=cfg.timeout)
    except (httpx.TimeoutException, httpx.TransportError) as exc:
        raise RetryableEmbeddingError(f"transport error: {exc}") from exc
    if resp.status_code == 429 or resp.status_code >= 500:
        raise RetryableEmbeddingError(f"HTTP {resp.status_code}")
    if resp.status_code != 200:
        raise FatalEmbeddingError(f"HTTP {resp.status_code}: {resp.text[:200]}")
    try:
        data = resp.json()["data"]
        vecs: list = [None] * len(texts)
        for item in data:
            vecs[int(item["index"])] = np.asarray(item["embedding"], dtype=np.float64)
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        raise FatalEmbeddingError(f"malformed response body: {exc}") from exc
    if any(v is None for v in vecs) or len(data) != len(texts):
        raise FatalEmbeddingError(f"expected {len(texts)} embeddings, got {len(data)}")
    for v in vecs:
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise FatalEmbeddingError("non-finite or non-vector embedding")
        if cfg.dim is not None and v.shape[0] != cfg.dim:
            raise DimMismatchError(f"provider returned dim {v.shape[0]}, store expects {cfg.dim}")
    return vecs


class HttpProvider:
    def __init__(self, cfg: EndpointConfig, client: Optional[httpx.Client] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.cfg = cfg
        self.client = client
        self.sleep = sleep
        self.provider_id = f"http:{cfg.model}"

    @property
    def dim(self) -> Optional[int]:
        return self.cfg.dim

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return http_embed(texts, self.cfg, self.client, self.sleep)


@dataclass
class Embedding:
    asn: int
    vec: np.ndarray
    template_version: str = ""
    provider_id: str = ""

    @property
    def dim(self) -> int:
        return int(self.vec.shape[0])


def embed_as(segments: Sequence[PromptSegment], provider) -> Embedding:
    """Mean of the segment embeddings; any provider failure fails the AS."""
    if not segments:
        raise ValueError("no segments to embed")
    asn = segments[0].asn
    if any(s.asn != asn for s in segments):
        raise ValueError("segments belong to different ASes")
    try:
        vecs = provider.embed([s.text for s in segments])
    except EmbeddingError as exc:
        raise type(exc)(f"AS{asn}: {exc}") from exc
    mat = np.vstack(vecs).astype(np.float64)
    return Embedding(asn, mat.mean(axis=0), segments[0].template_version, provider.provider_id)


class EmbeddingStore:
    """ASN-keyed vectors sharing one dimension, provider and template version."""

    def __init__(self, dim: int, provider_id: str = "", template_version: str = "",
                 extra: Optional[dict] = None):
        self.dim = dim
        self.provider_id = provider_id
        self.template_version = template_version
        self.extra = dict(extra or {})
        self.vectors: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, asn: int) -> bool:
        return asn in self.vectors

    def __getitem__(self, asn: int) -> np.ndarray:
        return self.vectors[asn]

    def get(self, asn, default=None):
        return self.vectors.get(asn, default)

    def asns(self) -> list[int]:
        return sorted(self.vectors)

    def put(self, asn: int, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DimMismatchError(f"AS{asn}: vector dim {vec.shape} != store dim {self.dim}")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"AS{asn}: non-finite embedding")
        self.vectors[int(asn)] = vec

    def add(self, emb: Embedding) -> None:
        if self.provider_id and emb.provider_id and emb.provider_id != self.provider_id:
            raise ValueError(f"provider {emb.provider_id} does not match store {self.provider_id}")
        if self.template_version and emb.template_version and emb.template_version != self.template_version:
            raise ValueError("template version does not match store")
        self.put(emb.asn, emb.vec)

    def matrix(self, asns: Optional[Sequence[int]] = None) -> np.ndarray:
        asns = self.asns() if asns is None else asns
        if not asns:
            return np.zeros((0, self.dim))
        return np.vstack([self.vectors[a] for a in asns])

    def header(self) -> dict:
        h = {"dim": self.dim, "provider_id": self.provider_id, "template_version": self.template_version}
        h.update(self.extra)
        return h

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
            for asn in self.asns():
                fh.write(json.dumps({"asn": asn, "vec": self.vectors[asn].tolist()}) + "\n")

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            extra = {k: v for k, v in header.items() if k not in ("dim", "provider_id", "template_version")}
            store = cls(int(header["dim"]), header.get("provider_id", ""),
                        header.get("template_version", ""), extra)
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    store.put(rec["asn"], np.array(rec["vec"], dtype=np.float64))
        return store


def embed_all(
    segments_by_asn: dict[int, list[PromptSegment]],
    provider,
    store: EmbeddingStore,
    jobs: int = 4,
) -> dict[int, str]:
    """Embed every AS into ``store``; returns per-ASN error messages for failures."""
    asns = sorted(segments_by_asn)
    errors: dict[int, str] = {}

    def work(asn):
        try:
            return asn, embed_as(segments_by_asn[asn], provider), None
        except EmbeddingError as exc:
            return asn, None, exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, asns))
    else:
        results = [work(a) for a in asns]
    for asn, emb, exc in results:
        if exc is not None:
            if not exc.retryable and isinstance(exc, DimMismatchError):
                raise exc
            errors[asn] = str(exc)
            log.error("AS%d not embedded: %s", asn, exc)
            continue
        store.add(emb)
    return errors


def segments_from_dump(lines: Iterable[str]) -> dict[int, list[PromptSegment]]:
    out: dict[int, list[PromptSegment]] = {}
    version = ""
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        version = rec.get("template_version", version)
        seg = PromptSegment(int(rec["asn"]), int(rec["index"]), int(rec["total"]), rec["text"], version)
        out.setdefault(seg.asn, []).append(seg)
    for segs in out.values():
        segs.sort(key=lambda s: s.index)
    return out
