import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdnet.audit import audit_relays, byte_uniformity
from qkdnet.core import KeyMaterial, NodeId, Reader, new_key_id
from qkdnet.forwarding import HOP, UnreachableError, _read_hops, e2e_supplier
from qkdnet.seclevel import its, serial

from rigs import Chain

A, B, C, D, E = (NodeId("d1", n) for n in "abcde")
LINE = [(0, 1), (1, 2), (2, 3), (3, 4)]
RELAY_HDR = 2 + len("relay")


def hop_ciphertexts(rig):
    """Wire taps on every relay channel; returns the list that fills with HOP ciphertexts."""
    seen = []

    def tap(side, payload):
        msg = payload[RELAY_HDR:]
        if msg[:1] == bytes([HOP]):
            r = Reader(msg[1:])
            r.uid()
            _read_hops(r)
            [r.uid() for _ in range(r.count())]
            [r.u32() for _ in range(r.count())]
            r.u32()
            r.uid()
            seen.append(r.octets())
        return payload

    for cid, ch in rig.net.channels.items():
        if cid.startswith("relay:"):
            ch.tamper = tap
    return seen


def test_linear_path_and_pad_ledger():
    rig = Chain([A, B, C, D, E], LINE)
    path = rig.federation.compute_path(A, E)
    assert path.hops == (A, B, C, D, E) and len(path.links) == 4
    rid, h = rig.request(0, 4)
    rig.sched.run(until=30.0)
    assert h.state == "committed"
    ka, ke = rig.e2e(A), rig.e2e(E)
    assert ka == ke and len(ka) == 1 and next(iter(ka))[0] == rid
    for mid in (B, C, D):
        assert rig.e2e(mid) == set()
    # exactly one pad spent per hop, on both ends of that hop
    for k, (i, j) in enumerate(LINE):
        up = [x for x in rig.stores[rig.nodes[i]].consumption_log if x[2] == f"link:{k}"]
        down = [x for x in rig.stores[rig.nodes[j]].consumption_log if x[2] == f"link:{k}"]
        assert [x[3] for x in up] == [f"relay:{rid}:out"]
        assert [x[3] for x in down] == [f"relay:{rid}:in"]
        assert up[0][1] == down[0][1]
    audit = audit_relays(rig.agents, rig.stores, rig.federation.handles)
    assert audit.ok and audit.completed_hops == 4 and audit.pads_out == audit.pads_in == 4


def test_label_is_serial_over_hops():
    rig = Chain([A, B, C], [(0, 1), (1, 2)], label_tags=("c",))
    _, h = rig.request(0, 2)
    rig.sched.run(until=10.0)
    assert h.label == serial(its("c"), its("c")) == its("c")
    [entry] = rig.stores[C].entries(e2e_supplier(A, C))
    assert entry.label == h.label


def test_tie_break_prefers_smaller_link_ids():
    # a-b-d uses link ids 1,2; a-c-d uses 3,4
    rig = Chain([A, B, C, D], [(0, 1), (1, 3), (0, 2), (2, 3)])
    assert rig.federation.compute_path(A, D).hops == (A, B, D)
    # once a->b has no pads owned by a, the other branch is the only one
    while rig.stores[A].available(B, "link:0", owned=True):
        rig.stores[A].take_oldest(B, "link:0", 32, "test")
    assert rig.federation.compute_path(A, D).hops == (A, C, D)


def test_unreachable():
    rig = Chain([A, B, C], [(0, 1)])
    with pytest.raises(UnreachableError):
        rig.federation.compute_path(A, C)
    rig = Chain([A, B, C], [(0, 1), (1, 2)], pads=0)
    with pytest.raises(UnreachableError):
        rig.request(0, 2)
    with pytest.raises(UnreachableError):
        rig.federation.compute_path(A, A)


def test_pads_run_out_then_unreachable():
    rig = Chain([A, B, C], [(0, 1), (1, 2)], pads=3)
    for _ in range(3):
        rig.request(0, 2)
    rig.sched.run(until=20.0)
    assert len(rig.e2e(A)) == 3
    with pytest.raises(UnreachableError):
        rig.request(0, 2)


def test_killing_middle_node_aborts_and_burns():
    rig = Chain([A, B, C, D, E], LINE, latency_ms=50)
    rid, h = rig.request(0, 4)
    rig.sched.at(0.12, rig.net.kill_node, str(C))
    rig.sched.run(until=120.0)
    assert h.state == "aborted"
    assert all(rig.e2e(n) == set() for n in rig.nodes)
    audit = audit_relays(rig.agents, rig.stores, rig.federation.handles)
    assert audit.ok and audit.pads_unresolved + audit.pads_burned + audit.pads_in >= audit.pads_out
    # no spent pad ever goes back into service
    for k in range(4):
        for n in rig.nodes:
            s = rig.stores[n]
            spent = {kid for _, kid, sup, _ in s.consumption_log if sup == f"link:{k}"}
            served = {e.key_id for e in s.entries(f"link:{k}") if not s.is_consumed(f"link:{k}", e.key_id)}
            assert not spent & served


def test_first_hop_down_aborts_at_once():
    rig = Chain([A, B, C], [(0, 1), (1, 2)])
    rig.net.kill("relay:0")
    _, h = rig.request(0, 2)
    rig.sched.run(until=1.0)
    assert h.state == "aborted"


def test_cross_domain_delivery():
    x = [NodeId("east", "a"), NodeId("east", "gw"), NodeId("west", "gw"), NodeId("west", "b")]
    rig = Chain(x, [(0, 1), (1, 2), (2, 3)])
    path = rig.federation.compute_path(x[0], x[3])
    assert path.hops == tuple(x) and path.border_crossings == frozenset({1})
    _, h = rig.request(0, 3)
    rig.sched.run(until=20.0)
    assert h.state == "committed"
    assert rig.e2e(x[0]) == rig.e2e(x[3]) != set()
    assert rig.e2e(x[1]) == rig.e2e(x[2]) == set()


def test_no_border_agreement_is_unreachable():
    x = [NodeId("east", "a"), NodeId("west", "b"), NodeId("south", "c")]
    rig = Chain(x, [(0, 1)])
    with pytest.raises(UnreachableError):
        rig.federation.compute_path(x[0], x[2])


def test_plaintext_never_on_the_wire_nor_in_transit_stores():
    rig = Chain([A, B, C, D], LINE[:3])
    wire = hop_ciphertexts(rig)
    for _ in range(3):
        rig.request(0, 3)
    rig.sched.run(until=20.0)
    keys = [k for _, k in rig.e2e(A)]
    assert len(keys) == 3 and len(wire) == 9
    for k in keys:
        assert all(k not in ct for ct in wire)
        for mid in (B, C):
            assert all(e.key.data != k for e in rig.stores[mid].entries())
    for mid in (B, C):
        assert not [ev for ev in rig.agents[mid].ledger if ev["event"] in ("store", "commit")]


def test_replayed_hop_rejected():
    rig = Chain([A, B, C], [(0, 1), (1, 2)])
    frames = []
    ch = rig.net.channels["relay:0"]
    ch.tamper = lambda side, p: (frames.append(p) if p[RELAY_HDR:RELAY_HDR + 1] == bytes([HOP]) else None) or p
    _, h = rig.request(0, 2)
    rig.sched.run(until=10.0)
    assert h.state == "committed"
    ch.tamper = None
    rig.agents[A].ports[B].send(frames[0][RELAY_HDR:])
    rig.sched.run(until=20.0)
    assert rig.agents[B].counters["rejected_replay"] == 1
    assert len(rig.e2e(C)) == 1
    assert audit_relays(rig.agents, rig.stores, rig.federation.handles).ok


def test_wire_ciphertexts_look_uniform_for_a_fixed_key():
    n = 120
    rig = Chain([A, B, C], [(0, 1), (1, 2)], pads=n)
    wire = hop_ciphertexts(rig)
    path = rig.federation.compute_path(A, C)
    fixed = KeyMaterial(bytes(32))
    for i in range(n):
        rig.agents[A].start_relay(new_key_id(rig.rng), path, fixed)
        rig.sched.run(until=rig.sched.now + 1.0)
    assert len(wire) == 2 * n
    _, p = byte_uniformity(wire)
    assert p > 1e-3


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 3), st.floats(0.0, 0.5), st.floats(0.1, 40.0), st.integers(0, 50))
def test_link_outage_keeps_all_or_nothing(link, at, outage, seed):
    rig = Chain([A, B, C, D, E], LINE, seed=seed, latency_ms=30)
    _, h = rig.request(0, 4)
    rig.sched.at(at, rig.net.kill, f"relay:{link}")
    rig.sched.at(at + outage, rig.net.heal, f"relay:{link}")
    rig.sched.run(until=300.0)
    assert h.state in ("committed", "aborted")
    assert rig.e2e(A) == rig.e2e(E)
    assert (len(rig.e2e(A)) == 1) == (h.state == "committed")
    assert audit_relays(rig.agents, rig.stores, rig.federation.handles).ok
