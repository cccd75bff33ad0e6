"""Per-vantage prefix trees built from a RIB snapshot, and route-change
extraction from an UPDATE stream by longest prefix match.
"""
from __future__ import annotations

import ipaddress
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Union

log = logging.getLogger(__name__)

ASN_MAX = 2**32 - 1
_MAXLEN = {4: 32, 6: 128}

PathElement = Union[int, frozenset]
AsPath = tuple  # tuple[PathElement, ...]


class ParseError(ValueError):
    """A malformed line in one of the text inputs."""


class FamilyMismatch(ValueError):
    pass


class OutOfOrderError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Prefix:
    family: int
    network: int
    length: int

    def __post_init__(self):
        maxlen = _MAXLEN.get(self.family)
        if maxlen is None:
            raise ValueError(f"unknown address family {self.family}")
        if not 0 <= self.length <= maxlen:
            raise ValueError(f"prefix length {self.length} out of range for IPv{self.family}")
        if self.network & ((1 << (maxlen - self.length)) - 1):
            raise ValueError("host bits set beyond prefix length")

    @classmethod
    def parse(cls, text: str) -> "Prefix":
        try:
            net = ipaddress.ip_network(text.strip(), strict=False)
        except ValueError as exc:
            raise ParseError(f"malformed prefix {text!r}") from exc
        return cls(net.version, int(net.network_address), net.prefixlen)

    @property
    def maxlen(self) -> int:
        return _MAXLEN[self.family]

    def bit(self, i: int) -> int:
        return (self.network >> (self.maxlen - 1 - i)) & 1

    def covers(self, other: "Prefix") -> bool:
        if other.family != self.family or other.length < self.length:
            return False
        shift = self.maxlen - self.length
        return (other.network >> shift) == (self.network >> shift)

    def __str__(self) -> str:
        addr = ipaddress.ip_address(self.network) if self.family == 4 else ipaddress.IPv6Address(self.network)
        return f"{addr}/{self.length}"


def _parse_asn(tok: str) -> int:
    if not tok.isdigit():
        raise ParseError(f"bad ASN {tok!r}")
    asn = int(tok)
    if asn > ASN_MAX:
        raise ParseError(f"ASN {asn} exceeds 32 bits")
    return asn


def parse_as_path(text: str) -> AsPath:
    """Parse ``"7500 2497 {3491,17557}"`` into a tuple of ints and frozensets."""
    elements = []
    for tok in text.split():
        if tok.startswith("{"):
            if not tok.endswith("}"):
                raise ParseError(f"unterminated AS set {tok!r}")
            members = [m for m in tok[1:-1].split(",") if m]
            if not members:
                raise ParseError("empty AS set")
            elements.append(frozenset(_parse_asn(m) for m in members))
        else:
            elements.append(_parse_asn(tok))
    if not elements:
        raise ParseError("empty AS path")
    return tuple(elements)


def format_as_path(path: AsPath) -> str:
    return " ".join(
        "{" + ",".join(str(a) for a in sorted(e)) + "}" if isinstance(e, frozenset) else str(e)
        for e in path
    )


def path_to_json(path: AsPath) -> list:
    return [sorted(e) if isinstance(e, frozenset) else e for e in path]


def path_from_json(items: list) -> AsPath:
    return tuple(frozenset(e) if isinstance(e, list) else int(e) for e in items)


def path_members(path: AsPath) -> set:
    """All ASNs on a path, AS sets expanded."""
    out = set()
    for e in path:
        if isinstance(e, frozenset):
            out |= e
        else:
            out.add(e)
    return out


@dataclass(frozen=True)
class RibEntry:
    vantage: int
    prefix: Prefix
    path: AsPath


@dataclass(frozen=True)
class Update:
    timestamp: int
    vantage: int
    prefix: Prefix
    path: Optional[AsPath]  # None for a withdrawal


@dataclass(frozen=True)
class RouteChange:
    timestamp: int
    vantage: int
    announced_prefix: Prefix
    matched_prefix: Prefix
    historical_path: AsPath
    updated_path: AsPath

    def to_dict(self) -> dict:
        return {
            "ts": self.timestamp,
            "vantage": self.vantage,
            "prefix": str(self.announced_prefix),
            "matched_prefix": str(self.matched_prefix),
            "hist_path": path_to_json(self.historical_path),
            "upd_path": path_to_json(self.updated_path),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RouteChange":
        return cls(
            int(d["ts"]),
            int(d["vantage"]),
            Prefix.parse(d["prefix"]),
            Prefix.parse(d["matched_prefix"]),
            path_from_json(d["hist_path"]),
            path_from_json(d["upd_path"]),
        )


class _Node:
    __slots__ = ("children", "prefix", "path")

    def __init__(self):
        self.children = [None, None]
        self.prefix = None
        self.path = None


class PrefixTree:
    """Binary trie over prefix bits for a single address family."""

    def __init__(self, family: int = 4):
        if family not in _MAXLEN:
            raise ValueError(f"unknown address family {family}")
        self.family = family
        self._root = _Node()
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _check(self, prefix: Prefix) -> None:
        if prefix.family != self.family:
            raise FamilyMismatch(f"IPv{prefix.family} prefix used with an IPv{self.family} tree")

    def insert(self, prefix: Prefix, path: AsPath) -> None:
        self._check(prefix)
        node = self._root
        for i in range(prefix.length):
            b = prefix.bit(i)
            nxt = node.children[b]
            if nxt is None:
                nxt = node.children[b] = _Node()
            node = nxt
        if node.prefix is None:
            self._size += 1
        node.prefix = prefix
        node.path = path

    def remove(self, prefix: Prefix) -> bool:
        """Remove the exact prefix; prune the branch it leaves empty."""
        self._check(prefix)
        trail = []
        node = self._root
        for i in range(prefix.length):
            b = prefix.bit(i)
            nxt = node.children[b]
            if nxt is None:
                return False
            trail.append((node, b))
            node = nxt
        if node.prefix is None:
            return False
        node.prefix = None
        node.path = None
        self._size -= 1
        while trail:
            parent, b = trail.pop()
            child = parent.children[b]
            if child.prefix is not None or child.children[0] is not None or child.children[1] is not None:
                break
            parent.children[b] = None
        return True

    def get(self, prefix: Prefix) -> Optional[AsPath]:
        self._check(prefix)
        node = self._root
        for i in range(prefix.length):
            node = node.children[prefix.bit(i)]
            if node is None:
                return None
        return node.path if node.prefix is not None else None

    def lookup(self, query: Prefix) -> Optional[tuple[Prefix, AsPath]]:
        """Longest stored prefix covering ``query``."""
        self._check(query)
        node = self._root
        best = (node.prefix, node.path) if node.prefix is not None else None
        for i in range(query.length):
            node = node.children[query.bit(i)]
            if node is None:
                break
            if node.prefix is not None:
                best = (node.prefix, node.path)
        return best

    def items(self) -> Iterator[tuple[Prefix, AsPath]]:
        stack = [self._root]
        while stack:
            node = stack.pop()
            if node.prefix is not None:
                yield node.prefix, node.path
            for child in node.children:
                if child is not None:
                    stack.append(child)


def lpm_lookup(tree: PrefixTree, query: Prefix) -> Optional[tuple[Prefix, AsPath]]:
    return tree.lookup(query)


class VantageTrees:
    """The IPv4 and IPv6 trees of one vantage point."""

    def __init__(self):
        self.trees = {4: PrefixTree(4), 6: PrefixTree(6)}

    def __len__(self) -> int:
        return len(self.trees[4]) + len(self.trees[6])

    def insert(self, prefix: Prefix, path: AsPath) -> None:
        self.trees[prefix.family].insert(prefix, path)

    def remove(self, prefix: Prefix) -> bool:
        return self.trees[prefix.family].remove(prefix)

    def lookup(self, query: Prefix):
        return self.trees[query.family].lookup(query)

    def get(self, prefix: Prefix):
        return self.trees[prefix.family].get(prefix)


@dataclass
class ParseStats:
    lines: int = 0
    errors: int = 0
    vantage_mismatch: int = 0
    error_lines: list = field(default_factory=list)

    def fail(self, lineno: int, msg: str) -> None:
        self.errors += 1
        if len(self.error_lines) < 100:
            self.error_lines.append((lineno, msg))
        log.warning("line %d: %s (skipped)", lineno, msg)


def read_rib(lines: Iterable[str], stats: Optional[ParseStats] = None) -> Iterator[RibEntry]:
    """Parse ``vantage<TAB>prefix<TAB>as_path`` lines."""
    stats = stats if stats is not None else ParseStats()
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        stats.lines += 1
        parts = line.split("\t")
        try:
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}")
            entry = RibEntry(_parse_asn(parts[0]), Prefix.parse(parts[1]), parse_as_path(parts[2]))
        except ParseError as exc:
            stats.fail(lineno, str(exc))
            continue
        if entry.path[0] != entry.vantage:
            stats.vantage_mismatch += 1
            log.info("line %d: path does not start at vantage AS%d", lineno, entry.vantage)
        yield entry


def read_updates(lines: Iterable[str], stats: Optional[ParseStats] = None) -> Iterator[Update]:
    stats = stats if stats is not None else ParseStats()
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        stats.lines += 1
        parts = line.split("\t")
        try:
            if len(parts) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}")
            if not parts[0].isdigit():
                raise ParseError(f"bad timestamp {parts[0]!r}")
            path = None if parts[3].strip() == "WITHDRAW" else parse_as_path(parts[3])
            upd = Update(int(parts[0]), _parse_asn(parts[1]), Prefix.parse(parts[2]), path)
        except ParseError as exc:
            stats.fail(lineno, str(exc))
            continue
        yield upd


def build_prefix_trees(entries: Iterable[RibEntry]) -> dict[int, VantageTrees]:
    """Index RIB entries per vantage; a repeated (vantage, prefix) keeps the last path."""
    trees: dict[int, VantageTrees] = {}
    for e in entries:
        t = trees.get(e.vantage)
        if t is None:
            t = trees[e.vantage] = VantageTrees()
        t.insert(e.prefix, e.path)
    for vantage in sorted(trees):
        log.debug("vantage AS%d: %d prefixes", vantage, len(trees[vantage]))
    return trees


def extract_route_changes(
    trees: dict[int, VantageTrees],
    updates: Iterable[Update],
    slack: int = 0,
) -> Iterator[RouteChange]:
    """Compare each announcement with the LPM route of its vantage.

    The trees are mutated: every announcement overwrites its exact prefix, and a
    withdrawal removes it, so later updates are compared against the most recent
    route rather than the original snapshot.
    """
    latest = None
    for upd in updates:
        if latest is not None and upd.timestamp < latest - slack:
            raise OutOfOrderError(
                f"update at {upd.timestamp} arrives after {latest} (slack {slack}s)"
            )
        latest = upd.timestamp if latest is None else max(latest, upd.timestamp)

        vt = trees.get(upd.vantage)
        if vt is None:
            vt = trees[upd.vantage] = VantageTrees()
        if upd.path is None:
            vt.remove(upd.prefix)
            continue
        hit = vt.lookup(upd.prefix)
        if hit is not None and hit[1] != upd.path:
            yield RouteChange(upd.timestamp, upd.vantage, upd.prefix, hit[0], hit[1], upd.path)
        vt.insert(upd.prefix, upd.path)


def write_changes(changes: Iterable[RouteChange], fh) -> int:
    n = 0
    for c in changes:
        fh.write(json.dumps(c.to_dict(), separators=(",", ":")) + "\n")
        n += 1
    return n


def read_changes(fh) -> Iterator[RouteChange]:
    for line in fh:
        if line.strip():
            yield RouteChange.from_dict(json.loads(line))
