"""Synthetic three-tier topology with benign churn and injected incidents.

Writes a RIB, an UPDATE stream, relationships, metadata, ROAs, a ground
truth file and a ready-to-run config into one directory.
"""
from __future__ import annotations

import ipaddress
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .as_profile import P2C, P2P, RelEdge, build_graph
from .route_monitor import format_as_path

EPOCH0 = 1_700_000_000 - 1_700_000_000 % 3600

_COUNTRIES = ["US", "DE", "BR", "IN", "JP", "GB", "FR", "NL", "SG", "ZA", "AU", "CA", "RU", "KR", "IT"]
_WORDS = ["Blue", "North", "Apex", "Delta", "Vertex", "Lumen", "Orbit", "Cobalt", "Summit", "Harbor",
          "Pioneer", "Quantum", "Silver", "Granite", "Aurora", "Falcon", "Meridian", "Nimbus", "Crest", "Atlas"]
_KINDS = ["Telecom", "Networks", "Broadband", "Hosting", "Cloud", "Internet", "Fiber", "Datacom"]


@dataclass
class ScenarioParams:
    seed: int = 7
    n_tier1: int = 8
    n_tier2: int = 40
    n_stub: int = 900
    n_vantage_t1: int = 6
    n_vantage_t2: int = 14
    hours: int = 24
    benign_updates: int = 60_000
    prepend_share: float = 0.4
    withdraw_share: float = 0.01
    max_detour: int = 1
    neighbor_batch_size: int = 8
    incident_hours: tuple = (6, 13, 19)
    incident_vantage_share: float = 0.7


@dataclass
class Topology:
    tier1: list
    tier2: list
    stubs: list
    providers: dict
    peers: dict
    edges: list
    org: dict = field(default_factory=dict)


def _asn_blocks(rng):
    t1 = [100 + 7 * i for i in range(64)]
    t2 = [1000 + 13 * i for i in range(400)]
    stubs = [20000 + 3 * i for i in range(8000)]
    return t1, t2, stubs


def build_topology(p: ScenarioParams, rng: random.Random) -> Topology:
    t1_pool, t2_pool, stub_pool = _asn_blocks(rng)
    tier1 = t1_pool[: p.n_tier1]
    tier2 = t2_pool[: p.n_tier2]
    stubs = stub_pool[: p.n_stub]
    providers: dict = {a: [] for a in tier1 + tier2 + stubs}
    peers: dict = {a: set() for a in tier1 + tier2 + stubs}
    edges = []

    for i, a in enumerate(tier1):
        for b in tier1[i + 1:]:
            edges.append(RelEdge(a, b, P2P))
            peers[a].add(b)
            peers[b].add(a)
    for a in tier2:
        for t in rng.sample(tier1, rng.choice((2, 2, 3))):
            edges.append(RelEdge(t, a, P2C))
            providers[a].append(t)
    for a in tier2:
        for b in rng.sample(tier2, 3):
            if b != a and b not in peers[a] and b not in providers[a]:
                edges.append(RelEdge(a, b, P2P))
                peers[a].add(b)
                peers[b].add(a)
    for s in stubs:
        k = rng.choices((1, 2, 3), weights=(55, 35, 10))[0]
        for t in rng.sample(tier2, k):
            edges.append(RelEdge(t, s, P2C))
            providers[s].append(t)
        if rng.random() < 0.08:
            t = rng.choice(tier1)
            edges.append(RelEdge(t, s, P2C))
            providers[s].append(t)

    # organizations: transit ASes stand alone or in pairs, stubs sometimes share an owner
    org = {}
    names = set()

    def new_org():
        while True:
            name = f"{rng.choice(_WORDS)} {rng.choice(_WORDS)} {rng.choice(_KINDS)}"
            if name not in names:
                names.add(name)
                return name

    for group in (tier1, tier2, stubs):
        for a in group:
            if org and rng.random() < 0.2:
                sib = rng.choice([x for x in group if x in org] or list(org))
                org[a] = org[sib]
            else:
                org[a] = new_org()
    return Topology(tier1, tier2, stubs, providers, peers, edges, org)


class Router:
    """Valley-free route candidates: climb from each end, meet at a shared AS or a peer link."""

    def __init__(self, topo: Topology):
        self.topo = topo
        self._up = {}
        self._cache = {}

    def up_chains(self, a) -> list:
        if a not in self._up:
            chains = [(a,)]
            for p in self.topo.providers[a]:
                chains.extend((a,) + c for c in self.up_chains(p))
            self._up[a] = chains
        return self._up[a]

    def routes(self, v, o) -> list:
        key = (v, o)
        if key in self._cache:
            return self._cache[key]
        if v == o:
            self._cache[key] = [(v,)]
            return self._cache[key]
        found = set()
        for cv in self.up_chains(v):
            for co in self.up_chains(o):
                a, b = cv[-1], co[-1]
                if a == b:
                    path = cv + co[::-1][1:]
                elif b in self.topo.peers[a]:
                    path = cv + co[::-1]
                else:
                    continue
                if len(set(path)) == len(path):
                    found.add(path)
        out = sorted(found, key=lambda r: (len(r), r))
        self._cache[key] = out
        return out

    def best(self, v, o):
        r = self.routes(v, o)
        return r[0] if r else None


def _prepend(path, rng):
    """Toggle origin prepending on a route."""
    base = list(path)
    while len(base) > 1 and base[-1] == base[-2]:
        base.pop()
    if len(base) != len(path):
        return tuple(base)
    return tuple(base + [base[-1]] * rng.choice((1, 2)))


def _addresses(prefix: str) -> int:
    return ipaddress.ip_network(prefix).num_addresses


def generate(outdir, params: ScenarioParams | None = None) -> dict:
    """Write the fixture into ``outdir``; returns the ground truth."""
    p = params or ScenarioParams()
    rng = random.Random(p.seed)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)

    topo = build_topology(p, rng)
    router = Router(topo)
    graph = build_graph(topo.edges)

    # address plan: each stub a /22 (sometimes with a /24 more-specific), each tier-2 an IPv6 /48
    origin_of: dict = {}
    for i, s in enumerate(topo.stubs):
        net = ipaddress.ip_network((int(ipaddress.IPv4Address("11.0.0.0")) + (i << 10), 22))
        origin_of[str(net)] = s
        if rng.random() < 0.3:
            sub = list(net.subnets(new_prefix=24))[rng.randrange(4)]
            origin_of[str(sub)] = s
    for i, t in enumerate(topo.tier2):
        origin_of[f"2001:db8:{i + 1:x}::/48"] = t
    prefixes = sorted(origin_of, key=lambda x: (ipaddress.ip_network(x).version, ipaddress.ip_network(x)))
    by_origin: dict = {}
    for pf, o in origin_of.items():
        by_origin.setdefault(o, []).append(pf)

    vantages = sorted(rng.sample(topo.tier1, p.n_vantage_t1) + rng.sample(topo.tier2, p.n_vantage_t2))

    # RIB: best route per vantage and prefix
    state = {}
    with open(out / "rib.tsv", "w") as fh:
        fh.write("# vantage\tprefix\tas_path\n")
        for v in vantages:
            for pf in prefixes:
                r = router.best(v, origin_of[pf])
                if r is None:
                    continue
                state[(v, pf)] = r
                fh.write(f"{v}\t{pf}\t{format_as_path(r)}\n")

    used = set(vantages)

    def pick_stub(cond):
        pool = [s for s in topo.stubs if s not in used and cond(s)]
        s = rng.choice(pool)
        used.add(s)
        return s

    victim = pick_stub(lambda s: len(by_origin[s]) >= 2)
    hijacker = pick_stub(lambda s: topo.org[s] != topo.org[victim] and not set(topo.providers[s]) & set(topo.providers[victim]))

    leaker = pick_stub(lambda s: len([x for x in topo.providers[s] if x in topo.tier2]) >= 2)
    p1, p2 = sorted(x for x in topo.providers[leaker] if x in topo.tier2)[:2]
    leak_origins = [s for s in topo.stubs if p2 in topo.providers[s] and s not in used and s != leaker][:3]
    leak_pfx = sorted(pf for s in leak_origins for pf in by_origin[s][:1])

    victim2 = pick_stub(lambda s: True)
    forger = pick_stub(lambda s: topo.org[s] != topo.org[victim2]
                       and graph.role(s, victim2) is None
                       and not set(topo.providers[s]) & set(topo.providers[victim2]))

    incident_pfx = set(by_origin[victim]) | set(leak_pfx) | set(by_origin[victim2])

    updates = []
    t_end = EPOCH0 + p.hours * 3600
    keys = sorted(state)
    churnable = [k for k in keys if k[1] not in incident_pfx
                 and len(router.routes(k[0], origin_of[k[1]])) > 1]
    withdrawn = set()
    n = 0
    while n < p.benign_updates:
        ts = rng.randrange(EPOCH0, t_end)
        v, pf = rng.choice(churnable)
        cur = state[(v, pf)]
        if (v, pf) in withdrawn:
            new = router.best(v, origin_of[pf])
            withdrawn.discard((v, pf))
        elif rng.random() < p.withdraw_share:
            updates.append((ts, v, pf, None, "benign"))
            withdrawn.add((v, pf))
            continue
        elif rng.random() < p.prepend_share:
            new = _prepend(cur, rng)
        else:
            # path exploration: stay within max_detour hops of the best route
            cands = router.routes(v, origin_of[pf])
            limit = len(cands[0]) + p.max_detour
            alts = [r for r in cands[:4] if r != cur and len(r) <= limit]
            new = rng.choice(alts) if alts else _prepend(cur, rng)
        state[(v, pf)] = new
        updates.append((ts, v, pf, new, "benign"))
        n += 1

    # incidents: an origin change, a route leak, a forged-adjacency path manipulation
    truth = {"incidents": [], "params": {k: v for k, v in vars(p).items() if k != "incident_hours"}}
    hours = list(p.incident_hours)
    def incident(kind, responsible, pfxs, path_for, hour):
        start = EPOCH0 + hour * 3600 + 300
        affected = sorted(rng.sample(vantages, round(p.incident_vantage_share * len(vantages))))
        for pf in pfxs:
            for v in affected:
                bad = path_for(v, pf)
                if bad is None or bad == state.get((v, pf)):
                    continue
                t_on = start + rng.randrange(0, 1200)
                t_off = start + 1800 + rng.randrange(0, 1200)
                updates.append((t_on, v, pf, bad, kind))
                updates.append((t_off, v, pf, router.best(v, origin_of[pf]), kind))
        truth["incidents"].append({
            "type": kind,
            "responsible_as": responsible,
            "prefixes": sorted(pfxs),
            "start": start,
            "end": start + 3000,
        })

    def hijack_path(v, pf):
        return router.best(v, hijacker)

    incident("OriginChange", hijacker, by_origin[victim], hijack_path, hours[0])

    def leak_path(v, pf):
        head = router.best(v, p1)
        if head is None or leaker in head or p2 in head:
            return None
        return head + (leaker, p2, origin_of[pf])

    incident("RouteLeak", leaker, leak_pfx, leak_path, hours[1])

    def forged_path(v, pf):
        head = router.best(v, forger)
        return None if head is None else head + (victim2,)

    incident("PathManipulation", forger, by_origin[victim2], forged_path, hours[2])

    updates.sort(key=lambda u: (u[0], u[1], u[2]))
    with open(out / "updates.tsv", "w") as fh:
        for ts, v, pf, path, _ in updates:
            fh.write(f"{ts}\t{v}\t{pf}\t{'WITHDRAW' if path is None else format_as_path(path)}\n")

    with open(out / "relationships.txt", "w") as fh:
        fh.write("# provider|customer|-1 or peer|peer|0\n")
        for e in topo.edges:
            fh.write(f"{e.a}|{e.b}|{'-1' if e.rel == P2C else '0'}\n")

    cone = {}

    def customer_cone(a):
        if a not in cone:
            s = {a}
            for b, role in graph.neighbors(a).items():
                if role == "customer":
                    s |= customer_cone(b)
            cone[a] = s
        return cone[a]

    with open(out / "metadata.jsonl", "w") as fh:
        for a in sorted(topo.providers):
            c = customer_cone(a)
            cone_pfx = [pf for x in c for pf in by_origin.get(x, [])]
            own = by_origin.get(a, [])
            rec = {
                "asn": a,
                "orgName": topo.org[a],
                "country": rng.choice(_COUNTRIES),
                "numberAsns": len(c),
                "numberPrefixes": len(cone_pfx),
                "numberAddresses": sum(_addresses(x) for x in cone_pfx if ":" not in x),
                "announcingPrefixes": len(own),
                "announcingAddresses": sum(_addresses(x) for x in own if ":" not in x),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    with open(out / "roa.csv", "w") as fh:
        fh.write("prefix,max_length,asn\n")
        for pf in prefixes:
            o = origin_of[pf]
            if o == victim or o == victim2 or rng.random() < 0.7:
                net = ipaddress.ip_network(pf)
                fh.write(f"{pf},{24 if net.version == 4 else net.prefixlen},{o}\n")

    config = {
        "rib": "rib.tsv",
        "updates": "updates.tsv",
        "relationships": "relationships.txt",
        "metadata": "metadata.jsonl",
        "roa": "roa.csv",
        "workdir": "out",
        "neighbor_batch_size": p.neighbor_batch_size,
        "provider": "mock",
        "seed": p.seed,
    }
    with open(out / "config.json", "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
    truth["n_benign_updates"] = p.benign_updates
    with open(out / "ground_truth.json", "w") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
    return truth
