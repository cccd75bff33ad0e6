import io
import ipaddress
import json
import random

import pytest
from hypothesis import given, strategies as st

from semroute.route_monitor import (
    FamilyMismatch, OutOfOrderError, ParseStats, Prefix, PrefixTree, RouteChange, Update,
    VantageTrees, build_prefix_trees, extract_route_changes, format_as_path, lpm_lookup,
    parse_as_path, path_from_json, path_to_json, read_changes, read_rib, read_updates,
    write_changes,
)


def P(s):
    return Prefix.parse(s)


def linear_lpm(entries, query):
    """Longest stored prefix covering the query, by scanning everything."""
    q = ipaddress.ip_network(str(query))
    best = None
    for pfx, path in entries.items():
        n = ipaddress.ip_network(str(pfx))
        if n.version == q.version and q.subnet_of(n):
            if best is None or n.prefixlen > best[0].length:
                best = (pfx, path)
    return best


def random_prefix(rng, family):
    bits = 32 if family == 4 else 128
    length = rng.randrange(0, bits + 1) if rng.random() < 0.3 else rng.randrange(max(0, bits // 4), bits // 2 + 4)
    # cluster addresses so covers actually happen
    top = rng.getrandbits(4) << (bits - 4)
    addr = top | rng.getrandbits(bits - 4)
    net = ipaddress.ip_network((addr, length), strict=False) if family == 4 else \
        ipaddress.IPv6Network((addr, length), strict=False)
    return P(str(net))


def test_prefix_parse_and_str():
    assert str(P("10.1.2.0/24")) == "10.1.2.0/24"
    assert str(P("2001:db8::/32")) == "2001:db8::/32"
    assert P("10.1.2.3/16") == P("10.1.0.0/16")
    assert P("10.0.0.0/8").covers(P("10.9.0.0/16"))
    assert not P("10.9.0.0/16").covers(P("10.0.0.0/8"))


@pytest.mark.parametrize("bad", ["10.0.0.0/33", "nonsense", "10.0.0/8x"])
def test_prefix_parse_rejects(bad):
    with pytest.raises(ValueError):
        P(bad)


def test_worked_example_lpm():
    tree = VantageTrees()
    tree.insert(P("192.0.152.0/22"), (7500, 2497, 36561))
    upd = Update(100, 7500, P("192.0.153.0/24"), (7500, 2497, 3491, 17557))
    (c,) = list(extract_route_changes({7500: tree}, [upd]))
    assert c.matched_prefix == P("192.0.152.0/22")
    assert c.historical_path == (7500, 2497, 36561)
    assert c.updated_path == (7500, 2497, 3491, 17557)


def test_lpm_matches_linear_scan():
    rng = random.Random(11)
    for _ in range(300):
        family = rng.choice((4, 6))
        tree = PrefixTree(family)
        entries = {}
        for _ in range(rng.randrange(0, 25)):
            p = random_prefix(rng, family)
            tree.insert(p, (rng.randrange(1, 99),))
            entries[p] = tree.get(p)
        for _ in range(5):
            q = random_prefix(rng, family)
            assert lpm_lookup(tree, q) == linear_lpm(entries, q)


def test_insert_lookup_roundtrip_and_remove():
    t = PrefixTree(4)
    t.insert(P("10.0.0.0/8"), (1,))
    t.insert(P("10.1.0.0/16"), (2,))
    assert t.lookup(P("10.1.0.0/16")) == (P("10.1.0.0/16"), (2,))
    assert t.lookup(P("10.1.5.0/24"))[0] == P("10.1.0.0/16")
    assert t.remove(P("10.1.0.0/16"))
    assert not t.remove(P("10.1.0.0/16"))
    assert t.lookup(P("10.1.5.0/24"))[0] == P("10.0.0.0/8")
    assert len(t) == 1
    assert t.lookup(P("11.0.0.0/8")) is None


def test_family_mismatch():
    with pytest.raises(FamilyMismatch):
        PrefixTree(4).insert(P("2001:db8::/32"), (1,))


def test_default_route_covers_everything():
    t = PrefixTree(6)
    t.insert(P("::/0"), (9,))
    assert t.lookup(P("2001:db8:1::/48"))[0] == P("::/0")


def test_as_path_parse_and_format():
    p = parse_as_path("1 2 {5,3} 4")
    assert p == (1, 2, frozenset({3, 5}), 4)
    assert format_as_path(p) == "1 2 {3,5} 4"
    assert path_from_json(path_to_json(p)) == p
    assert parse_as_path("1 {3,5}") == parse_as_path("1 {5,3}")


@pytest.mark.parametrize("bad", ["", "1 x", "1 {}", "1 4294967296", "{1,2"])
def test_as_path_rejects(bad):
    with pytest.raises(ValueError):
        parse_as_path(bad)


def test_read_rib_skips_bad_lines():
    text = "# header\n1\t10.0.0.0/8\t1 2 3\nbroken line\n1\t10.0.0.0/33\t1 2\n2\t10.0.0.0/8\t9 2\n"
    stats = ParseStats()
    rows = list(read_rib(io.StringIO(text), stats))
    assert len(rows) == 2
    assert stats.errors == 2
    assert stats.vantage_mismatch == 1


def test_read_updates_withdraw():
    text = "5\t1\t10.0.0.0/8\tWITHDRAW\n6\t1\t10.0.0.0/8\t1 7\n"
    ups = list(read_updates(io.StringIO(text)))
    assert ups[0].path is None and ups[1].path == (1, 7)


def _trees(rows):
    return build_prefix_trees(read_rib(io.StringIO("".join(f"{v}\t{p}\t{a}\n" for v, p, a in rows))))


def test_duplicate_rib_last_write_wins():
    trees = _trees([(1, "10.0.0.0/8", "1 2"), (1, "10.0.0.0/8", "1 3")])
    assert trees[1].get(P("10.0.0.0/8")) == (1, 3)


def test_identical_path_emits_nothing():
    trees = _trees([(1, "10.0.0.0/8", "1 2")])
    assert list(extract_route_changes(trees, [Update(1, 1, P("10.0.0.0/8"), (1, 2))])) == []


def test_reference_evolves():
    trees = _trees([(1, "10.0.0.0/8", "1 2")])
    ups = [Update(1, 1, P("10.0.0.0/8"), (1, 3)), Update(2, 1, P("10.0.0.0/8"), (1, 4))]
    a, b = extract_route_changes(trees, ups)
    assert a.historical_path == (1, 2)
    assert b.historical_path == (1, 3)


def test_withdraw_then_announce():
    trees = _trees([(1, "10.0.0.0/8", "1 2"), (1, "10.1.0.0/16", "1 5")])
    ups = [Update(1, 1, P("10.1.0.0/16"), None), Update(2, 1, P("10.1.0.0/16"), (1, 6))]
    (c,) = extract_route_changes(trees, ups)
    assert c.matched_prefix == P("10.0.0.0/8")


def test_unknown_vantage_gets_fresh_tree():
    trees = _trees([(1, "10.0.0.0/8", "1 2")])
    ups = [Update(1, 9, P("10.0.0.0/8"), (9, 2)), Update(2, 9, P("10.0.0.0/8"), (9, 3))]
    (c,) = extract_route_changes(trees, ups)
    assert c.vantage == 9 and c.historical_path == (9, 2)


def test_out_of_order():
    trees = _trees([(1, "10.0.0.0/8", "1 2")])
    ups = [Update(10, 1, P("10.0.0.0/8"), (1, 3)), Update(5, 1, P("10.0.0.0/8"), (1, 4))]
    with pytest.raises(OutOfOrderError):
        list(extract_route_changes(trees, ups))
    trees = _trees([(1, "10.0.0.0/8", "1 2")])
    assert len(list(extract_route_changes(trees, ups, slack=5))) == 2


def test_changes_file_roundtrip():
    c = RouteChange(5, 1, P("10.1.0.0/16"), P("10.0.0.0/8"), (1, frozenset({2, 3})), (1, 4))
    buf = io.StringIO()
    assert write_changes([c], buf) == 1
    rec = json.loads(buf.getvalue())
    assert set(rec) == {"ts", "vantage", "prefix", "matched_prefix", "hist_path", "upd_path"}
    assert rec["hist_path"] == [1, [2, 3]]
    buf.seek(0)
    assert list(read_changes(buf)) == [c]


@given(st.lists(st.tuples(st.integers(0, 2**32 - 1), st.integers(0, 32)), min_size=1, max_size=20))
def test_every_change_has_differing_paths(items):
    trees = {1: VantageTrees()}
    ups = [Update(i, 1, Prefix.parse(str(ipaddress.ip_network((a, l), strict=False))), (1, a % 3))
           for i, (a, l) in enumerate(items)]
    for c in extract_route_changes(trees, ups):
        assert c.historical_path != c.updated_path
