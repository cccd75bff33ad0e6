"""AS business-relationship graph, per-AS text descriptions split into
bounded segments, and relationship-noise perturbation.
"""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field, fields
from functools import lru_cache
from importlib import resources
from typing import Iterable, Optional

log = logging.getLogger(__name__)

P2P = "P2P"
P2C = "P2C"
PROVIDER, PEER, CUSTOMER = "provider", "peer", "customer"

DEFAULT_BATCH_SIZE = 50
DEFAULT_MAX_CHARS = 8000


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class RelEdge:
    a: int
    b: int
    rel: str  # P2C: a is provider of b

    def key(self) -> tuple[int, int]:
        return (self.a, self.b) if self.a < self.b else (self.b, self.a)


class AsGraph:
    """Adjacency keyed by ASN; each neighbor carries its role as seen from the key AS."""

    def __init__(self):
        self.edges: list[RelEdge] = []
        self.adjacency: dict[int, dict[int, str]] = {}

    def _link(self, x: int, y: int, role: str) -> None:
        self.adjacency.setdefault(x, {})[y] = role

    def add(self, e: RelEdge) -> None:
        self.edges.append(e)
        if e.rel == P2P:
            self._link(e.a, e.b, PEER)
            self._link(e.b, e.a, PEER)
        else:
            self._link(e.a, e.b, CUSTOMER)
            self._link(e.b, e.a, PROVIDER)

    def __contains__(self, asn: int) -> bool:
        return asn in self.adjacency

    def nodes(self) -> list[int]:
        return sorted(self.adjacency)

    def neighbors(self, asn: int) -> dict[int, str]:
        return self.adjacency.get(asn, {})

    def role(self, x: int, y: int) -> Optional[str]:
        """Role of ``y`` from ``x``'s point of view, or None without an edge."""
        return self.adjacency.get(x, {}).get(y)

    def counts(self, asn: int) -> tuple[int, int, int]:
        p = q = c = 0
        for role in self.neighbors(asn).values():
            if role == PROVIDER:
                p += 1
            elif role == PEER:
                q += 1
            else:
                c += 1
        return p, q, c

    def degree(self, asn: int) -> int:
        return len(self.neighbors(asn))


def build_graph(edges: Iterable[RelEdge]) -> AsGraph:
    g = AsGraph()
    seen: dict[tuple[int, int], RelEdge] = {}
    for e in edges:
        if e.a == e.b:
            log.warning("self-loop on AS%d skipped", e.a)
            continue
        k = e.key()
        prev = seen.get(k)
        if prev is not None:
            same = prev.rel == e.rel and (e.rel == P2P or (prev.a, prev.b) == (e.a, e.b))
            if not same:
                log.warning("conflicting relationship for AS%d-AS%d; keeping %s", e.a, e.b, prev)
            continue
        seen[k] = e
        g.add(e)
    return g


def read_relationships(lines: Iterable[str]) -> Iterable[RelEdge]:
    """CAIDA serial-1 lines: ``a|b|-1`` (a provides transit to b) or ``a|b|0``."""
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("|")
        try:
            a, b, r = int(parts[0]), int(parts[1]), parts[2].strip()
        except (IndexError, ValueError):
            log.warning("relationship line %d malformed: %r", lineno, line)
            continue
        if r == "-1":
            yield RelEdge(a, b, P2C)
        elif r == "0":
            yield RelEdge(a, b, P2P)
        else:
            log.warning("relationship line %d: unknown type %r", lineno, r)


def write_relationships(graph: AsGraph, fh) -> None:
    for e in graph.edges:
        fh.write(f"{e.a}|{e.b}|{'-1' if e.rel == P2C else '0'}\n")


@dataclass
class AsMetadata:
    asn: int
    orgName: Optional[str] = None
    country: Optional[str] = None
    numberAsns: Optional[int] = None
    numberPrefixes: Optional[int] = None
    numberAddresses: Optional[int] = None
    announcingPrefixes: Optional[int] = None
    announcingAddresses: Optional[int] = None

    @classmethod
    def from_dict(cls, d: dict) -> "AsMetadata":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def read_metadata(lines: Iterable[str]) -> dict[int, AsMetadata]:
    out = {}
    for line in lines:
        if line.strip():
            m = AsMetadata.from_dict(json.loads(line))
            out[int(m.asn)] = m
    return out


@dataclass(frozen=True)
class PromptSegment:
    asn: int
    index: int
    total: int
    text: str
    template_version: str = ""

    def to_dict(self) -> dict:
        return {"asn": self.asn, "index": self.index, "total": self.total, "text": self.text}


@lru_cache(maxsize=None)
def load_template(name: str = "as_description_v1.json") -> dict:
    with resources.files("semroute.templates").joinpath(name).open(encoding="utf-8") as fh:
        return json.load(fh)


def _fmt(v) -> str:
    return "unknown" if v is None or v == "" else str(v)


def ordered_neighbors(asn: int, graph: AsGraph) -> list[tuple[int, str]]:
    """Neighbors by descending degree, then ascending ASN."""
    nbrs = graph.neighbors(asn)
    return sorted(nbrs.items(), key=lambda kv: (-graph.degree(kv[0]), kv[0]))


def render_description(
    asn: int,
    graph: AsGraph,
    meta: Optional[AsMetadata],
    neighbor_batch_size: int = DEFAULT_BATCH_SIZE,
    max_chars: Optional[int] = DEFAULT_MAX_CHARS,
    template: Optional[dict] = None,
) -> list[PromptSegment]:
    """Render the description of ``asn`` as one segment per neighbor batch.

    Every segment repeats the stable attribute block. Raises ProfileError if a
    segment is longer than ``max_chars``.
    """
    if neighbor_batch_size <= 0:
        raise ProfileError("neighbor_batch_size must be positive")
    tpl = template or load_template()
    meta = meta or AsMetadata(asn)
    p, q, c = graph.counts(asn)
    stable = tpl["stable"].format(
        asn=asn,
        orgName=_fmt(meta.orgName),
        country=_fmt(meta.country),
        provider=p,
        peer=q,
        customer=c,
        total=p + q + c,
        numberAsns=_fmt(meta.numberAsns),
        numberPrefixes=_fmt(meta.numberPrefixes),
        numberAddresses=_fmt(meta.numberAddresses),
        announcingPrefixes=_fmt(meta.announcingPrefixes),
        announcingAddresses=_fmt(meta.announcingAddresses),
    )
    nbrs = ordered_neighbors(asn, graph)
    total = max(1, math.ceil(len(nbrs) / neighbor_batch_size))
    segments = []
    for k in range(total):
        batch = nbrs[k * neighbor_batch_size:(k + 1) * neighbor_batch_size]
        parts = [stable]
        if batch:
            parts.append(tpl["neighbors_header"].format(index=k + 1, total=total))
            for n, role in batch:
                np_, nq, nc = graph.counts(n)
                parts.append(tpl["neighbor_line"].format(
                    neighbor=n, role=role, asn=asn, provider=np_, peer=nq, customer=nc))
        remaining = len(nbrs) - (k + 1) * neighbor_batch_size
        if k < total - 1:
            parts.append(tpl["more"].format(remaining=remaining))
        text = "".join(parts)
        if max_chars is not None and len(text) > max_chars:
            raise ProfileError(
                f"AS{asn} segment {k + 1} has {len(text)} chars, limit {max_chars}")
        segments.append(PromptSegment(asn, k + 1, total, text, tpl["version"]))
    return segments


def render_auto(
    asn: int,
    graph: AsGraph,
    meta: Optional[AsMetadata],
    neighbor_batch_size: int = DEFAULT_BATCH_SIZE,
    max_chars: int = DEFAULT_MAX_CHARS,
) -> list[PromptSegment]:
    """Halve the batch size until every segment fits ``max_chars``."""
    size = neighbor_batch_size
    while True:
        try:
            return render_description(asn, graph, meta, size, max_chars)
        except ProfileError:
            if size == 1:
                raise
            size = max(1, size // 2)


def perturb_graph(graph: AsGraph, noise_type: str, ratio: float, seed: int) -> AsGraph:
    """Delete, add, or flip ``floor(ratio * |E|)`` relationships."""
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must be within [0, 1]")
    rng = random.Random(seed)
    edges = list(graph.edges)
    k = math.floor(ratio * len(edges))
    if noise_type == "delete":
        drop = set(rng.sample(range(len(edges)), k))
        edges = [e for i, e in enumerate(edges) if i not in drop]
    elif noise_type == "add":
        nodes = graph.nodes()
        present = {e.key() for e in edges}
        max_new = len(nodes) * (len(nodes) - 1) // 2 - len(present)
        k = min(k, max_new)
        added = 0
        while added < k:
            a, b = rng.sample(nodes, 2)
            key = (a, b) if a < b else (b, a)
            if key in present:
                continue
            present.add(key)
            edges.append(RelEdge(a, b, rng.choice((P2P, P2C))))
            added += 1
    elif noise_type == "flip":
        for i in sorted(rng.sample(range(len(edges)), k)):
            e = edges[i]
            if e.rel == P2C:
                edges[i] = RelEdge(e.b, e.a, P2C)
            elif rng.random() < 0.5:
                edges[i] = RelEdge(e.a, e.b, P2C)
            else:
                edges[i] = RelEdge(e.b, e.a, P2C)
    else:
        raise ValueError(f"unknown noise type {noise_type!r}")
    return build_graph(edges)


@dataclass
class OrgIndex:
    """ASN to organization name, from the metadata file."""

    org: dict[int, str] = field(default_factory=dict)

    @classmethod
    def from_metadata(cls, meta: dict[int, AsMetadata]) -> "OrgIndex":
        return cls({a: m.orgName for a, m in meta.items() if m.orgName})

    def get(self, asn: int) -> Optional[str]:
        return self.org.get(asn)
