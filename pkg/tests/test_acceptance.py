"""End-to-end acceptance checks; each test reports one PASS/FAIL line in the summary."""

import math
import time
import uuid
from itertools import chain, combinations
from pathlib import Path

import pytest

from qkdnet import run_scenario
from qkdnet.audit import audit_relays
from qkdnet.border import unseal
from qkdnet.cli import sample_config
from qkdnet.config import load_config, load_script
from qkdnet.core import KeyPackage, LinkType, NodeId, PathId, Validity, deserialize, serialize
from qkdnet.forwarding import HOP, UnreachableError
from qkdnet.rng import Drbg
from qkdnet.seclevel import Base, SecurityExpr, SecurityLabel, label_with_pqc_auth, normalize, parallel, serial

from rigs import SENDER, Chain, LinkPair, M3Rig, M4Rig

ALL_PAIRS = str(Path(sample_config()).with_name("all_pairs.yaml"))


@pytest.fixture
def criterion(record_property):
    def note(n, title, **detail):
        record_property("criterion", n)
        record_property("title", title)
        record_property("detail", ", ".join(f"{k}={v}" for k, v in detail.items()))
    return note


# 1 ------------------------------------------------------------------------


def test_c1_link_rate_reproduction(criterion):
    t0 = time.perf_counter()
    rig = LinkPair(links=(("q", LinkType.QKD, 256, "kem-a", "sig-a", ("det",)),))
    rig.sched.run(until=60.0)
    ka = {(e.key_id, e.key.data) for e in rig.sa.entries("q")}
    kb = {(e.key_id, e.key.data) for e in rig.sb.entries("q")}
    wall = time.perf_counter() - t0
    criterion(1, "256 bit/s, 32-byte keys: 60 +/- 6 keys per minute, identical", keys_a=len(ka), keys_b=len(kb),
              wall_s=round(wall, 3))
    assert ka == kb
    assert 54 <= len(ka) <= 66
    assert wall < 1.0


# 2 ------------------------------------------------------------------------


def test_c2_method4_throughput(criterion):
    t0 = time.perf_counter()
    rig = M4Rig(block_size=50, space_ms=600, ground_ms=50)
    window = 20.0
    rig.sender.run(until=window)
    rig.sched.run(until=window)
    matched = rig.keys(rig.ss) & rig.keys(rig.sr)
    rate = len(matched) / window
    wall = time.perf_counter() - t0
    criterion(2, "method 4, blocks of 50, 600/50 ms: >= 16 matched keys/s", keys_per_s=rate, wall_s=round(wall, 3))
    assert rate >= 16.0
    assert wall < 5.0


# 3 ------------------------------------------------------------------------


def _subsets(u):
    return [frozenset(c) for c in chain.from_iterable(combinations(u, r) for r in range(len(u) + 1))]


def test_c3_security_algebra_tables(criterion):
    t0 = time.perf_counter()
    ITS = lambda s: SecurityLabel(Base.ITS, s)
    MC = lambda s: SecurityLabel(Base.MC, s)
    one = SecurityExpr.of
    cases = 0
    for s1 in _subsets("xyzw"):
        for s2 in _subsets("xyzw"):
            assert parallel(one(ITS(s1)), one(ITS(s2))) == one(ITS(s1 & s2))
            assert parallel(one(MC(s1)), one(MC(s2))) == one(MC(s1 & s2))
            assert parallel(one(ITS(s1)), one(MC(s2))) == normalize([ITS(s1), MC(s2)])
            assert parallel(one(label_with_pqc_auth(ITS(s1))), one(label_with_pqc_auth(ITS(s2)))) == one(MC(s1 & s2))
            assert serial(one(MC(s1)), one(ITS(s2))) == one(MC(s1 | s2))
            assert serial(one(ITS(s1)), one(ITS(s2))) == one(ITS(s1 | s2))
            cases += 6
    wall = time.perf_counter() - t0
    criterion(3, "security label algebra, both tables, exhaustive", cases=cases, wall_s=round(wall, 3))
    assert wall < 1.0


# 4 and 8 ------------------------------------------------------------------


@pytest.fixture(scope="module")
def all_pairs_runs():
    cfg, script = load_config(sample_config()), load_script(ALL_PAIRS)
    out = []
    for _ in range(2):
        t0 = time.perf_counter()
        rep = run_scenario(cfg, script)
        out.append((rep, time.perf_counter() - t0))
    return out


def test_c4_four_method_e2e(criterion, all_pairs_runs):
    rep, wall = all_pairs_runs[0]
    d = rep.data
    methods = sorted({b["method"] for b in d["borders"]})
    nodes = list(rep.deployment.stores)
    criterion(4, "three testbeds, methods 1-4, every node pair", committed=d["e2e"]["committed"],
              requested=d["e2e"]["requested"], wall_s=round(wall, 3))
    assert methods == [1, 2, 3, 4]
    assert d["e2e"]["requested"] == len(nodes) * (len(nodes) - 1) // 2
    assert d["e2e"]["committed"] == d["e2e"]["requested"]
    # independent check of the report's claims: bytes equal at the ends, absent elsewhere
    dep = rep.deployment
    for req in d["e2e"]["requests"]:
        rid = uuid.UUID(req["rid"])
        src, dst = NodeId.parse(req["source"]), NodeId.parse(req["destination"])
        held = {n: [e.key.data for e in s.entries() if e.key_id == rid] for n, s in dep.stores.items()}
        assert held[src] == held[dst] and len(held[src]) == 1
        assert all(not v for n, v in held.items() if n not in (src, dst))
    assert d["checks"]["no_intermediate_copy"] and d["checks"]["e2e_bytes_equal"]
    assert wall < 10.0


def test_c8_determinism(criterion, all_pairs_runs):
    (a, _), (b, _) = all_pairs_runs
    same_json = a.to_json() == b.to_json()
    criterion(8, "same seed, identical report and trace hash", trace=a.data["trace_hash"][:12])
    assert same_json
    assert a.data["trace_hash"] == b.data["trace_hash"]
    assert list(a.deployment.tail_trace()) == list(b.deployment.tail_trace())


# 5 ------------------------------------------------------------------------


def test_c5_single_path_secrecy(criterion):
    """An oracle holding one path's transcript and secret keys guesses one key byte."""
    trials = 10**5
    rig = M4Rig(psk=b"", kdf="xor")
    paths = rig.sender.paths
    secret = {PathId.SPACE: rig.space.kem, PathId.GROUND: rig.ground.kem}
    test_rng = Drbg(5)
    v = Validity(0, 2**40)
    hits = 0
    t0 = time.perf_counter()
    for i in range(trials):
        rid = uuid.UUID(bytes=test_rng.bytes(16))
        r1, r2 = test_rng.bytes(32), test_rng.bytes(32)
        wire = {
            PathId.SPACE: rig.sender._package(rid, paths[PathId.SPACE], r1, v),
            PathId.GROUND: rig.sender._package(rid, paths[PathId.GROUND], r2, v),
        }
        seen = PathId.SPACE if i % 2 == 0 else PathId.GROUND
        # the oracle: decrypt the revealed half; the other half's best guess is a constant
        pkg = deserialize(wire[seen], KeyPackage)
        half, _ = unseal(pkg.rnd_id, secret[seen], pkg.ciphertexts[0])
        guess = half[0]
        # the actual key, from the receiving gateway
        for path in (PathId.SPACE, PathId.GROUND):
            assert rig.receiver.handle_package(wire[path], path, str(SENDER))
        rig.receiver.participant._apply(rid)
        actual = rig.sr.entry("m4", rid).key.data
        hits += guess == actual[0]
    p = 1 / 256
    sigma = math.sqrt(p * (1 - p) / trials)
    rate = hits / trials
    criterion(5, "one path revealed: key byte guess no better than chance", trials=trials, hits=hits,
              rate=round(rate, 6), bound=round(p + 3 * sigma, 6), wall_s=round(time.perf_counter() - t0, 1))
    assert rate <= p + 3 * sigma


# 6 ------------------------------------------------------------------------


def _corruptions(raw):
    for i in range(len(raw)):
        for x in range(1, 256):
            d = bytearray(raw)
            d[i] ^= x
            yield bytes(d)


def test_c6_corruption_is_dos_not_injection(criterion):
    counts = {}

    # method 2: the PQC link responder
    rig = LinkPair(links=(("p", LinkType.PQC, 256, "kem-a", "sig-a", ("pa",)),))
    a, b = rig.sessions["p"]
    _, pkg = a.build_package()
    raw = serialize(pkg)
    n = 0
    for bad in _corruptions(raw):
        before = b.stats.dos + b.stats.replays
        assert b.receive_package(bad) is False
        assert b.stats.dos + b.stats.replays == before + 1
        n += 1
    assert rig.sb.entries("p") == [] and b.participant.prepared_count() == 0
    assert b.receive_package(raw) is True  # the genuine package still goes through
    counts["m2"] = n

    # method 3
    m3 = M3Rig()
    _, pkg = m3.sender.build()
    raw = serialize(pkg)
    c = m3.receiver.counters
    n = 0
    for bad in _corruptions(raw):
        before = c.dos + c.replays + c.unknown_sender + c.malformed
        assert m3.receiver.handle_package(bad, str(SENDER)) is False
        assert c.dos + c.replays + c.unknown_sender + c.malformed == before + 1
        n += 1
    assert m3.sr.entries() == [] and m3.receiver.participant.prepared_count() == 0
    assert m3.receiver.handle_package(raw, str(SENDER)) is True
    counts["m3"] = n

    # method 4: each half corrupted while the genuine other half waits in the queue
    n = 0
    for bad_path, good_path in ((PathId.SPACE, PathId.GROUND), (PathId.GROUND, PathId.SPACE)):
        m4 = M4Rig()
        rid = uuid.UUID(int=99)
        v = Validity(0, 2**40)
        good = m4.sender._package(rid, m4.sender.paths[good_path], m4.rng.bytes(32), v)
        target = m4.sender._package(rid, m4.sender.paths[bad_path], m4.rng.bytes(32), v)
        assert m4.receiver.handle_package(good, good_path, str(SENDER))
        c = m4.receiver.counters
        for bad in _corruptions(target):
            before = c.dos + c.replays + c.unknown_sender + c.malformed
            m4.receiver.handle_package(bad, bad_path, str(SENDER))
            assert c.dos + c.replays + c.unknown_sender + c.malformed == before + 1
            n += 1
        assert m4.sr.entries() == [] and m4.receiver.participant.prepared_count() == 0
        assert m4.receiver.handle_package(target, bad_path, str(SENDER)) is True
        assert m4.receiver.participant.prepared_count() == 1
    counts["m4"] = n
    criterion(6, "every single-byte corruption rejected and counted", **counts)


# 7 ------------------------------------------------------------------------


def test_c7_pad_discipline(criterion):
    rng = Drbg(77)
    doms = ["d0", "d1", "d2"]
    nodes = [NodeId(doms[i // 3], f"n{i}") for i in range(9)]
    inside = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (6, 7), (7, 8), (6, 8)]
    edges = inside + [(2, 3), (5, 6), (8, 0), (1, 4)]
    rig = Chain(nodes, edges, pads=600, seed=77, latency_ms=15)
    captured = []

    def tap_for(k):
        def tap(side, payload):
            if payload[7:8] == bytes([HOP]) and len(captured) < 200 and rng.randrange(10) == 0:
                captured.append((k, side, payload[7:]))
            return payload
        return tap

    for k in range(len(edges)):
        rig.net.channels[f"relay:{k}"].tamper = tap_for(k)
    started = unreachable = 0

    def go(s, d):
        nonlocal started, unreachable
        try:
            rig.request(s, d)
            started += 1
        except UnreachableError:
            unreachable += 1

    for i in range(1000):
        t = i * 0.2
        src = rng.randrange(9)
        dst = (src + 1 + rng.randrange(8)) % 9
        rig.sched.at(t, go, src, dst)
        if i % 50 == 25:
            cid = f"relay:{rng.randrange(len(edges))}"
            rig.sched.at(t, rig.net.kill, cid)
            rig.sched.at(t + rng.uniform(0.01, 3.0), rig.net.heal, cid)
    rig.sched.run(until=230.0)
    e2e_before = {n: rig.e2e(n) for n in nodes}

    # an active attacker re-sends captured hop messages along their original hop
    for k in range(len(edges)):
        rig.net.channels[f"relay:{k}"].tamper = None
    for k, side, msg in captured:
        i, j = edges[k]
        frm, to = (nodes[i], nodes[j]) if side == 0 else (nodes[j], nodes[i])
        rig.agents[frm].ports[to].send(msg)
    rejected_before = sum(a.counters["rejected_replay"] for a in rig.agents.values())
    rig.sched.run(until=400.0)
    rejected = sum(a.counters["rejected_replay"] for a in rig.agents.values()) - rejected_before

    audit = audit_relays(rig.agents, rig.stores, rig.federation.handles)
    criterion(7, "10^3 randomized relays: pads = hops, no reuse, no replay", relays=audit.relays,
              committed=audit.committed, aborted=audit.aborted, hops=audit.completed_hops,
              pads_in=audit.pads_in, burned=audit.pads_burned, replayed=len(captured),
              rejected=rejected)
    assert started + unreachable == 1000 and audit.relays == started
    assert audit.committed + audit.aborted == audit.relays
    assert audit.committed > 900 and len(captured) > 50 and rejected > 0
    assert {n: rig.e2e(n) for n in nodes} == e2e_before
    assert audit.pads_in == audit.completed_hops
    assert audit.pad_reuse == 0 and audit.replay_accepted == 0
    assert audit.ok, audit.problems
