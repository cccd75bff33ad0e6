import io
import json
import random

import pytest
from hypothesis import given, strategies as st

from oracles import components, knee_oracle, valley_free_oracle
from semroute.aggregator import (
    INVALID, NOT_FOUND, ORIGIN_CHANGE, PATH_MANIPULATION, ROA_MISCONFIG, ROUTE_LEAK,
    UNCLASSIFIED, VALID, WEAK_PATH_TAMPERING, AnomalyEvent, PrefixEvent, RoaTable,
    build_prefix_events, change_candidates, classify_event, dump_report, emit_report,
    hop_types, is_reserved, is_valley_free, knee_point, link_events, load_reserved,
    path_manipulated, render_text,
)
from semroute.as_profile import P2C, P2P, RelEdge, build_graph
from semroute.detector import ScoredChange
from semroute.route_monitor import Prefix, RouteChange


def test_knee_examples():
    assert knee_point([10, 9, 8, 2, 1, 1]) == 2
    assert knee_point([5, 4, 3, 2, 1]) == 4
    assert knee_point([3, 1]) == 0
    assert knee_point([]) == 0


@given(st.lists(st.integers(0, 60), max_size=50))
def test_knee_matches_oracle(values):
    curve = sorted(values, reverse=True)
    assert knee_point(curve) == knee_oracle(curve)


def sc(ts, vantage, prefix, hist, upd, d=1.0, flagged=True):
    p = Prefix.parse(prefix)
    return ScoredChange(RouteChange(ts, vantage, p, p, hist, upd), d, d, flagged, 0.5)


def test_prefix_event_from_knee():
    # one prefix, per-window vantage counts [5, 4, 4, 1, 1]
    w = 100
    counts = [5, 4, 4, 1, 1]
    flagged = []
    for win, n in enumerate(counts):
        for v in range(n):
            flagged.append(sc(win * w + v, 100 + v, "10.0.0.0/8", (100 + v, 7, 9), (100 + v, 8, 9)))
    events, theta = build_prefix_events(flagged, w)
    assert theta == 1
    (e,) = events
    assert [n for _, n in e.vp_count_curve] == [5, 4, 4]
    assert (e.start, e.end) == (0, 203)
    assert e.candidate_ases == frozenset({7, 8, 9})


def test_gap_splits_prefix_events():
    w = 10
    flagged = [sc(t, v, "10.0.0.0/8", (v, 5), (v, 6)) for t in (0, 25) for v in range(1, 5)]
    flagged += [sc(50, 9, "11.0.0.0/8", (9, 5), (9, 6)), sc(60, 9, "12.0.0.0/8", (9, 5), (9, 6))]
    events, theta = build_prefix_events(flagged, w)
    assert theta == 1
    assert [(str(e.prefix), e.start) for e in events] == [("10.0.0.0/8", 0), ("10.0.0.0/8", 25)]


def test_candidates_union_and_intersection():
    x = sc(0, 1, "10.0.0.0/8", (1, 2, frozenset({3, 4})), (1, 5, 4))
    assert change_candidates(x) == {2, 3, 4, 5}
    assert change_candidates(x, "intersection") == {4}


def test_empty_intersection_kept_unattributed():
    flagged = [sc(0, 1, "10.0.0.0/8", (1, 2), (1, 3)), sc(1, 4, "10.0.0.0/8", (4, 5), (4, 6))]
    events, _ = build_prefix_events(flagged, 100)
    (e,) = events
    assert not e.attributed
    (a,) = link_events(events)
    assert a.attribution == "unattributed" and a.responsible_ases == []


def pe(name, cands, start, end):
    return PrefixEvent(Prefix.parse(name), start, end, [], [], frozenset(cands))


def test_linking_rules():
    e1, e2 = pe("10.0.0.0/8", {1}, 0, 10), pe("11.0.0.0/8", {1, 2}, 5, 15)
    (a,) = link_events([e1, e2])
    assert a.responsible_ases == [1] and a.attribution == "exact"
    assert len(link_events([pe("10.0.0.0/8", {1}, 0, 4), pe("11.0.0.0/8", {1}, 5, 9)])) == 2
    assert len(link_events([pe("10.0.0.0/8", {1}, 0, 5), pe("11.0.0.0/8", {2}, 5, 9)])) == 2
    chain = link_events([pe("10.0.0.0/8", {1}, 0, 10), pe("11.0.0.0/8", {1, 2}, 5, 20),
                         pe("12.0.0.0/8", {2}, 15, 30)])
    assert len(chain) == 1
    assert chain[0].attribution == "ambiguous" and chain[0].responsible_ases == [1, 2]


def test_linking_matches_flood_fill():
    rng = random.Random(4)
    for _ in range(200):
        evs = []
        for k in range(rng.randrange(1, 12)):
            s = rng.randrange(0, 50)
            evs.append(pe(f"10.{k}.0.0/16", set(rng.sample(range(6), rng.randrange(1, 3))),
                          s, s + rng.randrange(0, 15)))
        linked = lambda i, j: (evs[i].start <= evs[j].end and evs[j].start <= evs[i].end
                               and bool(evs[i].candidate_ases & evs[j].candidate_ases))
        want = sorted(sorted(str(evs[i].prefix) for i in c) for c in components(len(evs), linked))
        got = sorted(sorted(str(m.prefix) for m in a.members) for a in link_events(evs))
        assert got == want


def test_event_ids_sorted():
    evs = link_events([pe("11.0.0.0/8", {1}, 50, 60), pe("10.0.0.0/8", {2}, 0, 5)])
    assert [(e.event_id, e.start) for e in evs] == [("E00001", 0), ("E00002", 50)]


def test_reserved_ranges():
    r = load_reserved()
    for asn in (0, 23456, 64496, 64512, 65534, 65535, 65551, 4200000000, 4294967295):
        assert is_reserved(asn, r)
    for asn in (1, 3356, 64495, 65552, 4199999999):
        assert not is_reserved(asn, r)


def test_reserved_override(tmp_path):
    f = tmp_path / "r.txt"
    f.write_text("# custom\n7-9\n100\n")
    assert load_reserved(f) == [(7, 9), (100, 100)]


def roa():
    return RoaTable.from_csv(io.StringIO(
        "prefix,max_length,asn\n10.0.0.0/16,24,1\n10.1.0.0/16,16,AS2\n2001:db8::/32,48,3\n"))


@pytest.mark.parametrize("prefix,origin,state", [
    ("10.0.0.0/16", 1, VALID),
    ("10.0.5.0/24", 1, VALID),
    ("10.0.5.0/25", 1, INVALID),
    ("10.0.5.0/24", 9, INVALID),
    ("10.1.0.0/16", 2, VALID),
    ("10.1.5.0/24", 2, INVALID),
    ("11.0.0.0/8", 1, NOT_FOUND),
    ("2001:db8:1::/48", 3, VALID),
])
def test_roa_validation(prefix, origin, state):
    assert roa().validate(Prefix.parse(prefix), origin) == state


def graph():
    # 1 and 2 peer at the top; 3 under 1; 4 under 2; 5 under 3 and 4
    return build_graph([RelEdge(1, 2, P2P), RelEdge(1, 3, P2C), RelEdge(2, 4, P2C),
                        RelEdge(3, 5, P2C), RelEdge(4, 5, P2C)])


def test_hop_types_and_valley_free():
    g = graph()
    assert hop_types((4, 2, 1, 3, 5), g) == "UUFD"
    assert is_valley_free(hop_types((3, 1, 2, 4, 5), g))
    # 5 passes a route from provider 3 up to provider 4
    assert not is_valley_free(hop_types((4, 5, 3), g))
    assert hop_types((4, 9), g) is None


def test_valley_free_against_state_machine():
    rng = random.Random(0)
    for _ in range(30):
        nodes = list(range(1, 7))
        edges = []
        for a in nodes:
            for b in nodes:
                if a < b and rng.random() < 0.5:
                    edges.append((a, b, "p2p") if rng.random() < 0.3 else
                                 (a, b, "p2c") if rng.random() < 0.5 else (b, a, "p2c"))
        g = build_graph([RelEdge(a, b, P2P if r == "p2p" else P2C) for a, b, r in edges])
        for _ in range(50):
            path = tuple(rng.sample(nodes, rng.randrange(2, 7)))
            types = hop_types(path, g)
            want = valley_free_oracle(path, edges)
            assert (types is None) == (want is None)
            if types is not None:
                assert is_valley_free(types) == want


def test_manipulation_checks():
    g = graph()
    r = load_reserved()
    assert path_manipulated((3, 64512, 5), g, r)
    assert path_manipulated((1, 4), g, r)
    assert not path_manipulated((1, 3, 5), g, r)


def event_of(*pairs, prefix="10.0.0.0/16"):
    changes = [sc(i, p[0][0], prefix, p[0], p[1]) for i, p in enumerate(pairs)]
    member = PrefixEvent(Prefix.parse(prefix), 0, len(changes), changes, [], frozenset())
    return AnomalyEvent("E00001", [prefix], [], 0, 0, [member])


def test_classify_leak_and_manipulation():
    g = graph()
    labels, _ = classify_event(event_of(((1, 3, 5), (4, 5, 3))), g)
    assert ROUTE_LEAK in labels
    labels, _ = classify_event(event_of(((1, 3, 5), (1, 64512, 5))), g)
    assert PATH_MANIPULATION in labels
    labels, _ = classify_event(event_of(((1, 3, 5), (2, 4, 5))), g)
    assert labels == [UNCLASSIFIED]


def test_classify_origin_change_paths():
    g = build_graph([RelEdge(1, 3, P2C), RelEdge(1, 6, P2C), RelEdge(1, 7, P2C)])
    ev = event_of(((1, 3), (1, 6)), prefix="10.0.5.0/24")
    orgs = {3: "A", 6: "B", 7: "A"}
    table = RoaTable.from_csv(io.StringIO("10.0.0.0/16,24,3\n"))

    labels, notes = classify_event(ev, g, None, None, orgs)
    assert labels == [WEAK_PATH_TAMPERING] and notes == ["needs-RPKI"]
    assert classify_event(ev, g, table, None, orgs)[0] == [ORIGIN_CHANGE]
    same_org = event_of(((1, 3), (1, 7)), prefix="10.0.5.0/24")
    assert classify_event(same_org, g, table, None, orgs)[0] == [ROA_MISCONFIG]
    unknown = event_of(((1, 3), (1, 6)), prefix="11.0.0.0/24")
    assert classify_event(unknown, g, table, None, orgs)[0] == [WEAK_PATH_TAMPERING]


def test_report_empty_and_deterministic():
    rep = emit_report([], {"seed": 1})
    assert rep == {"run": {"seed": 1}, "events": []}
    assert render_text(rep).startswith("0 anomaly event(s)")
    ev = event_of(((1, 3, 5), (1, 64512, 5)))
    ev.responsible_ases = [64512]
    a = dump_report(emit_report([ev], {"seed": 1}))
    assert a == dump_report(emit_report([ev], {"seed": 1}))
    rec = json.loads(a)["events"][0]
    for key in ("event_id", "prefixes", "responsible_ases", "start", "end", "patterns",
                "n_changes", "max_Dstar"):
        assert key in rec
