"""Aggregate flagged route changes into AS-attributed anomaly events.

Prefix axis: per prefix and window, count the vantages reporting a flagged
change and keep the (prefix, window) cells above the knee of the count
distribution. AS axis: intersect the ASes seen on the changed routes, then
link prefix events that overlap in time and share a candidate AS.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional, Sequence

import numpy as np

from .as_profile import CUSTOMER, PEER, PROVIDER, AsGraph
from .detector import ScoredChange, clean_path
from .route_monitor import Prefix, ParseError, path_members

ORIGIN_CHANGE = "OriginChange"
ROUTE_LEAK = "RouteLeak"
PATH_MANIPULATION = "PathManipulation"
ROA_MISCONFIG = "RoaMisconfig"
WEAK_PATH_TAMPERING = "WeakPathTampering"
UNCLASSIFIED = "Unclassified"


def knee_point(curve: Sequence[float]) -> float:
    """Value at the largest discrete second difference of a descending curve.

    Ties go to the smallest index; curves shorter than 3 give 0.
    """
    c = np.asarray(curve, dtype=np.float64)
    if c.size < 3:
        return 0.0
    second = c[:-2] - 2.0 * c[1:-1] + c[2:]
    return float(c[1 + int(np.argmax(second))])


def change_candidates(sc: ScoredChange, mode: str = "union") -> frozenset:
    """ASes on the historical and updated routes, without the vantage."""
    c = sc.change
    hist, upd = path_members(c.historical_path), path_members(c.updated_path)
    s = hist | upd if mode == "union" else hist & upd
    s.discard(c.vantage)
    return frozenset(s)


@dataclass
class PrefixEvent:
    prefix: Prefix
    start: int
    end: int
    changes: list
    vp_count_curve: list  # [(window_start, distinct vantages)]
    candidate_ases: frozenset

    @property
    def attributed(self) -> bool:
        return bool(self.candidate_ases)


def build_prefix_events(
    flagged: Iterable[ScoredChange],
    w: int,
    candidate_mode: str = "union",
) -> tuple[list[PrefixEvent], float]:
    """Returns the prefix events and the vantage-count threshold used."""
    cells: dict[tuple[Prefix, int], list[ScoredChange]] = {}
    for sc in flagged:
        if sc.flagged:
            cells.setdefault((sc.change.announced_prefix, sc.change.timestamp // w), []).append(sc)
    counts = {k: len({x.change.vantage for x in v}) for k, v in cells.items()}
    theta_vp = knee_point(sorted(counts.values(), reverse=True))

    by_prefix: dict[Prefix, list[int]] = {}
    for (prefix, win), n in counts.items():
        if n > theta_vp:
            by_prefix.setdefault(prefix, []).append(win)

    events = []
    for prefix in sorted(by_prefix):
        wins = sorted(by_prefix[prefix])
        runs = [[wins[0]]]
        for win in wins[1:]:
            if win == runs[-1][-1] + 1:
                runs[-1].append(win)
            else:
                runs.append([win])
        for run in runs:
            changes = [sc for win in run for sc in cells[(prefix, win)]]
            changes.sort(key=lambda x: (x.change.timestamp, x.change.vantage))
            cand = None
            for sc in changes:
                cs = change_candidates(sc, candidate_mode)
                cand = cs if cand is None else cand & cs
            events.append(PrefixEvent(
                prefix,
                changes[0].change.timestamp,
                changes[-1].change.timestamp,
                changes,
                [(win * w, counts[(prefix, win)]) for win in run],
                cand or frozenset(),
            ))
    return events, theta_vp


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return
        if self.size[ri] < self.size[rj]:
            ri, rj = rj, ri
        self.parent[rj] = ri
        self.size[ri] += self.size[rj]


@dataclass
class AnomalyEvent:
    event_id: str
    prefixes: list
    responsible_ases: list
    start: int
    end: int
    members: list
    attribution: str = "exact"  # exact | ambiguous | unattributed
    pattern_labels: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def changes(self) -> list[ScoredChange]:
        return [sc for pe in self.members for sc in pe.changes]


def _linked(a: PrefixEvent, b: PrefixEvent) -> bool:
    return a.start <= b.end and b.start <= a.end and bool(a.candidate_ases & b.candidate_ases)


def link_events(prefix_events: Sequence[PrefixEvent]) -> list[AnomalyEvent]:
    """Connected components of the overlap-and-shared-AS relation."""
    n = len(prefix_events)
    uf = UnionFind(n)
    order = sorted(range(n), key=lambda i: prefix_events[i].start)
    # sweep by start time; only events still open can overlap
    active: list[int] = []
    for i in order:
        ev = prefix_events[i]
        active = [j for j in active if prefix_events[j].end >= ev.start]
        for j in active:
            if _linked(ev, prefix_events[j]):
                uf.union(i, j)
        active.append(i)

    comps: dict[int, list[PrefixEvent]] = {}
    for i in range(n):
        comps.setdefault(uf.find(i), []).append(prefix_events[i])

    out = []
    for members in comps.values():
        members.sort(key=lambda pe: (pe.start, pe.prefix))
        inter = frozenset.intersection(*[pe.candidate_ases for pe in members])
        if inter:
            resp, attribution = inter, "exact"
        else:
            resp = frozenset().union(*[pe.candidate_ases for pe in members])
            attribution = "ambiguous" if resp else "unattributed"
        out.append(AnomalyEvent(
            "",
            sorted({str(pe.prefix) for pe in members}),
            sorted(resp),
            min(pe.start for pe in members),
            max(pe.end for pe in members),
            members,
            attribution,
        ))
    out.sort(key=lambda e: (e.start, e.end, e.prefixes))
    for k, e in enumerate(out, 1):
        e.event_id = f"E{k:05d}"
    return out


def load_reserved(path=None) -> list[tuple[int, int]]:
    if path is None:
        text = resources.files("semroute.data").joinpath("reserved_asns.txt").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    ranges = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        lo, _, hi = line.partition("-")
        ranges.append((int(lo), int(hi or lo)))
    return ranges


def is_reserved(asn: int, ranges: Sequence[tuple[int, int]]) -> bool:
    return any(lo <= asn <= hi for lo, hi in ranges)


VALID, INVALID, NOT_FOUND = "valid", "invalid", "notfound"


class RoaTable:
    """Route origin authorizations with RFC 6811 style origin validation."""

    def __init__(self):
        self._by_prefix: dict[Prefix, list[tuple[int, int]]] = {}
        self._lengths: dict[int, set] = {4: set(), 6: set()}

    def add(self, prefix: Prefix, max_length: int, asn: int) -> None:
        self._by_prefix.setdefault(prefix, []).append((max_length, asn))
        self._lengths[prefix.family].add(prefix.length)

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_prefix.values())

    @classmethod
    def from_csv(cls, lines: Iterable[str]) -> "RoaTable":
        t = cls()
        for row in csv.reader(lines):
            if not row or row[0].startswith("#") or row[0].strip() == "prefix":
                continue
            try:
                t.add(Prefix.parse(row[0]), int(row[1]), int(row[2].upper().removeprefix("AS")))
            except (ParseError, ValueError, IndexError):
                continue
        return t

    def validate(self, prefix: Prefix, origin) -> str:
        covering = False
        for length in sorted(self._lengths[prefix.family]):
            if length > prefix.length:
                break
            shift = prefix.maxlen - length
            key = Prefix(prefix.family, (prefix.network >> shift) << shift, length)
            for max_len, asn in self._by_prefix.get(key, ()):
                covering = True
                if isinstance(origin, int) and asn == origin and prefix.length <= max_len and asn != 0:
                    return VALID
        return INVALID if covering else NOT_FOUND


_HOP = {PROVIDER: "U", PEER: "F", CUSTOMER: "D"}


def hop_types(path, graph: AsGraph) -> Optional[str]:
    """Hop letters from origin towards the vantage: U climbs to a provider,
    F crosses a peer link, D descends to a customer. None if a hop has no
    known relationship or touches an AS set."""
    rev = path[::-1]
    out = []
    for x, y in zip(rev, rev[1:]):
        if isinstance(x, frozenset) or isinstance(y, frozenset):
            return None
        role = graph.role(x, y)
        if role is None:
            return None
        out.append(_HOP[role])
    return "".join(out)


def is_valley_free(types: str) -> bool:
    i, n = 0, len(types)
    while i < n and types[i] == "U":
        i += 1
    if i < n and types[i] == "F":
        i += 1
    return all(t == "D" for t in types[i:])


def path_manipulated(path, graph: AsGraph, reserved) -> bool:
    for e in path:
        members = e if isinstance(e, frozenset) else (e,)
        if any(is_reserved(a, reserved) for a in members):
            return True
    for x, y in zip(path, path[1:]):
        if isinstance(x, int) and isinstance(y, int) and graph.role(x, y) is None:
            return True
    return False


def classify_event(
    event: AnomalyEvent,
    graph: AsGraph,
    roa: Optional[RoaTable] = None,
    reserved: Optional[Sequence[tuple[int, int]]] = None,
    org_of: Optional[dict] = None,
) -> tuple[list[str], list[str]]:
    """Pattern labels and notes for one event."""
    reserved = load_reserved() if reserved is None else reserved
    org_of = org_of or {}
    labels: set = set()
    notes: set = set()
    for sc in event.changes():
        c = sc.change
        paths = [clean_path(c.historical_path), clean_path(c.updated_path)]
        for p in paths:
            types = hop_types(p, graph)
            if types is not None and not is_valley_free(types):
                labels.add(ROUTE_LEAK)
            if path_manipulated(p, graph, reserved):
                labels.add(PATH_MANIPULATION)
        o1, o2 = paths[0][-1], paths[1][-1]
        if o1 == o2 or not (isinstance(o1, int) and isinstance(o2, int)):
            continue
        org1, org2 = org_of.get(o1), org_of.get(o2)
        same_org = org1 is not None and org1 == org2
        if roa is None:
            notes.add("needs-RPKI")
            if not same_org:
                labels.add(WEAK_PATH_TAMPERING)
            continue
        s1 = roa.validate(c.announced_prefix, o1)
        s2 = roa.validate(c.announced_prefix, o2)
        if s1 != s2:
            labels.add(ROA_MISCONFIG if same_org else ORIGIN_CHANGE)
        elif not same_org and s1 == NOT_FOUND:
            labels.add(WEAK_PATH_TAMPERING)
    if not labels:
        labels.add(UNCLASSIFIED)
    return sorted(labels), sorted(notes)


def event_record(e: AnomalyEvent) -> dict:
    scores = [sc.norm_score for sc in e.changes()]
    return {
        "event_id": e.event_id,
        "prefixes": e.prefixes,
        "responsible_ases": e.responsible_ases,
        "attribution": e.attribution,
        "start": e.start,
        "end": e.end,
        "patterns": e.pattern_labels,
        "notes": e.notes,
        "n_changes": len(scores),
        "n_vantages": len({sc.change.vantage for sc in e.changes()}),
        "max_Dstar": max(scores) if scores else 0.0,
        "mean_Dstar": float(np.mean(scores)) if scores else 0.0,
    }


def emit_report(events: Sequence[AnomalyEvent], run: Optional[dict] = None) -> dict:
    ordered = sorted(events, key=lambda e: (e.start, e.event_id))
    return {"run": dict(run or {}), "events": [event_record(e) for e in ordered]}


def dump_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def render_text(report: dict) -> str:
    lines = [f"{len(report['events'])} anomaly event(s)"]
    for ev in report["events"]:
        ases = ", ".join(f"AS{a}" for a in ev["responsible_ases"]) or "-"
        lines.append(
            f"{ev['event_id']}  [{ev['start']} .. {ev['end']}]  {', '.join(ev['patterns'])}\n"
            f"    prefixes: {', '.join(ev['prefixes'])}\n"
            f"    responsible ({ev['attribution']}): {ases}\n"
            f"    changes: {ev['n_changes']} from {ev['n_vantages']} vantages, max D* {ev['max_Dstar']:.4f}"
        )
    return "\n".join(lines) + "\n"
