import uuid

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdnet.border import (
    ConfigError,
    MatchQueue,
    Method3Sender,
    Method4Sender,
    PathConfig,
    decode_block,
    encode_block,
    method1_bridge,
    method2_bridge,
    method3_label,
    method4_label,
)
from qkdnet.core import CipherBlock, KeyPackage, LinkType, PathId, Validity, serialize
from qkdnet.seclevel import its, mc, parallel, serial

from rigs import SENDER, LinkPair, M3Rig, M4Rig

QKD2 = (("l1", LinkType.QKD, 256, "kem-a", "sig-a", ("s1", "c")), ("l2", LinkType.QKD, 256, "kem-b", "sig-b", ("s2", "c")))
PQC2 = (("p1", LinkType.PQC, 256, "kem-a", "sig-a", ("s1", "c")), ("p2", LinkType.PQC, 256, "kem-b", "sig-b", ("s2", "c")))


def bridged(rig, store, supplier):
    return {(e.key_id, e.key.data) for e in store.entries(supplier)}


def test_method1_bridge_rate_and_label():
    rig = LinkPair(links=QKD2)
    ba, bb = method1_bridge(rig.sa, rig.sb, ["l1", "l2"])
    rig.sched.run(until=60.0)
    rig.stop()
    rig.sched.run(until=70.0)
    ka, kb = bridged(rig, rig.sa, ba.supplier_id), bridged(rig, rig.sb, bb.supplier_id)
    assert ka == kb and 54 <= len(ka) <= 66
    assert {e.label for e in rig.sa.entries(ba.supplier_id)} == {its("c")}
    # every bridge key is the XOR of one key per input
    a_in = {e.key_id: e.key.data for e in rig.sa.entries("l1")}
    b_in = {e.key_id: e.key.data for e in rig.sa.entries("l2")}
    xors = {bytes(x ^ y for x, y in zip(p, q)) for p in a_in.values() for q in b_in.values()}
    assert {k for _, k in ka} <= xors


def test_method1_bridge_never_falls_back():
    rig = LinkPair(links=QKD2)
    rig.net.kill("l2")
    ba, _ = method1_bridge(rig.sa, rig.sb, ["l1", "l2"])
    rig.sched.run(until=30.0)
    assert len(rig.sa.entries("l1")) >= 25
    assert rig.sa.entries(ba.supplier_id) == []
    assert ba.produced == 0


def test_method2_bridge_distinct_suites_and_label():
    rig = LinkPair(links=PQC2)
    ba, bb = method2_bridge(rig.sa, rig.sb, ["p1", "p2"], [("kem-a", "sig-a"), ("kem-b", "sig-b")])
    rig.sched.run(until=60.0)
    rig.stop()
    rig.sched.run(until=70.0)
    ka = bridged(rig, rig.sa, ba.supplier_id)
    assert ka == bridged(rig, rig.sb, bb.supplier_id) and 54 <= len(ka) <= 66
    assert {e.label for e in rig.sb.entries(bb.supplier_id)} == {mc("c")}
    with pytest.raises(ConfigError):
        method2_bridge(rig.sa, rig.sb, ["p1", "p2"], [("kem-a", "sig-a"), ("kem-a", "sig-b")])
    with pytest.raises(ConfigError):
        method2_bridge(rig.sa, rig.sb, ["p1", "p2"], [("kem-a", "sig-a"), ("kem-b", "sig-a")])


def test_bridge_needs_two_inputs():
    rig = LinkPair()
    with pytest.raises(ConfigError):
        method1_bridge(rig.sa, rig.sb, ["l1", "l1"])


# ------------------------------------------------------------------ method 3


@pytest.mark.parametrize("mode", ["a", "b"])
def test_method3_happy_path(mode):
    rig = M3Rig(mode=mode)
    rig.sender.send(20)
    rig.sched.run(until=5.0)
    ks, kr = rig.keys(rig.ss), rig.keys(rig.sr)
    assert ks == kr and len(ks) == 20
    c = rig.sender.counters
    assert (c.sent, c.delivered, c.lost) == (20, 20, 0)


def test_method3_labels():
    assert method3_label([("x",), ("y",)], "a") == serial(mc("x"), mc("y")) == mc("x", "y")
    assert method3_label([("x",), ("y",)], "b") == parallel(mc("x"), mc("y")) == mc()


def _m3_package(rig):
    _, pkg = rig.sender.build()
    return pkg


def test_method3_one_suite_corrupted_is_dos_not_key():
    rig = M3Rig()
    pkg = _m3_package(rig)
    for i in range(2):
        blocks = list(pkg.ciphertexts)
        b = blocks[i]
        ct = bytearray(b.ciphertext)
        ct[0] ^= 1
        blocks[i] = CipherBlock(b.suite_id, bytes(ct), b.payload)
        forged = KeyPackage(pkg.rnd_id, tuple(blocks), pkg.meta)
        # re-signed with the genuine keys: only the KEM cross-check can catch it
        from qkdnet.border import sign_package

        forged = sign_package(forged, rig.sigs)
        assert rig.receiver.handle_package(serialize(forged), str(SENDER)) is False
    assert rig.receiver.counters.dos == 2 and rig.receiver.counters.integrity_alarms == 2
    assert rig.sr.entries() == []


def test_method3_unknown_sender_and_replay():
    rig = M3Rig()
    data = serialize(_m3_package(rig))
    assert rig.receiver.handle_package(data, "elsewhere/gw") is False
    assert rig.receiver.counters.unknown_sender == 1
    assert rig.receiver.handle_package(data, str(SENDER)) is True
    assert rig.receiver.handle_package(data, str(SENDER)) is False
    assert rig.receiver.counters.replays == 1


def test_method3_replay_after_commit():
    rig = M3Rig()
    captured = []
    ch = rig.net.channels["m3"]
    ch.tamper = lambda side, p: (captured.append(p) if side == 0 else None) or p
    rig.sender.send(1)
    rig.sched.run(until=2.0)
    assert len(rig.keys(rig.sr)) == 1
    rig.ps.send(captured[0][4:])
    rig.sched.run(until=4.0)
    assert len(rig.keys(rig.sr)) == 1
    assert rig.receiver.counters.replays == 1


def test_method3_configuration_rules():
    rig = M3Rig()
    with pytest.raises(ConfigError):
        Method3Sender(SENDER, SENDER, rig.ps, rig.ss, rig.sched, rig.rng, rig.kems[:1], rig.sigs,
                      supplier_id="x", label=mc())
    with pytest.raises(ConfigError):
        Method3Sender(SENDER, SENDER, rig.ps, rig.ss, rig.sched, rig.rng, rig.kems, rig.sigs,
                      supplier_id="x", label=mc(), mode="c")


# ------------------------------------------------------------------ method 4


def test_method4_ground_and_space_match():
    rig = M4Rig(block_size=10)
    rig.sender.run(blocks=3)
    rig.sched.run(until=10.0)
    ks, kr = rig.keys(rig.ss), rig.keys(rig.sr)
    assert ks == kr and len(ks) == 30
    assert rig.receiver.losses == 0 and len(rig.receiver.queue) == 0
    assert {e.label for e in rig.sr.entries("m4")} == {mc()}


def test_method4_xor_kdf_is_rnd_xor():
    rig = M4Rig()
    rid = uuid.UUID(int=77)
    r1, r2 = rig.rng.bytes(32), rig.rng.bytes(32)
    v = Validity(0, 2**40)
    space = rig.sender._package(rid, rig.sender.paths[PathId.SPACE], r1, v)
    ground = rig.sender._package(rid, rig.sender.paths[PathId.GROUND], r2, v)
    assert rig.receiver.handle_package(space, PathId.SPACE, str(SENDER))
    assert len(rig.receiver.queue) == 1
    assert rig.receiver.handle_package(ground, PathId.GROUND, str(SENDER))
    assert rig.receiver.participant.prepared_count() == 1
    rig.receiver.participant._apply(rid)
    [entry] = rig.sr.entries("m4")
    assert entry.key.data == bytes(x ^ y for x, y in zip(r1, r2))
    assert entry.key_id == rid


def test_method4_psk_and_hkdf():
    for psk, kdf in ((b"pre-shared", "xor"), (b"pre-shared", "hkdf-sha256"), (b"", "hkdf-sha256")):
        rig = M4Rig(block_size=5, psk=psk, kdf=kdf)
        rig.sender.run(blocks=1)
        rig.sched.run(until=5.0)
        assert rig.keys(rig.ss) == rig.keys(rig.sr) and len(rig.keys(rig.sr)) == 5


@pytest.mark.parametrize("path", ["space", "ground"])
def test_method4_one_path_severed_delivers_nothing(path):
    rig = M4Rig(block_size=20, ttl=5.0)
    rig.net.kill(path)
    rig.sender.run(blocks=3)
    rig.sched.run(until=60.0)
    assert rig.keys(rig.sr) == set() and rig.keys(rig.ss) == set()
    c = rig.sender.counters
    assert c.lost == c.sent == 60
    if path == "ground":
        assert rig.receiver.losses == 60


def test_method4_config_rules():
    rig = M4Rig()
    paths = list(rig.sender.paths.values())
    ports = rig.sender.ports
    kw = dict(supplier_id="x")
    with pytest.raises(ConfigError):
        Method4Sender(SENDER, SENDER, ports, rig.ss, rig.sched, rig.rng, paths, block_size=0, **kw)
    with pytest.raises(ConfigError):
        Method4Sender(SENDER, SENDER, ports, rig.ss, rig.sched, rig.rng, paths, block_size=101, **kw)
    with pytest.raises(ConfigError):
        Method4Sender(SENDER, SENDER, ports, rig.ss, rig.sched, rig.rng, paths, kdf="md5", **kw)
    same = [paths[0], PathConfig(PathId.GROUND, paths[0].kem, paths[0].sig)]
    with pytest.raises(ConfigError):
        Method4Sender(SENDER, SENDER, ports, rig.ss, rig.sched, rig.rng, same, **kw)
    with pytest.raises(ConfigError):
        Method4Sender(SENDER, SENDER, ports, rig.ss, rig.sched, rig.rng, paths[:1], **kw)


def test_method4_label_is_parallel_of_paths():
    rig = M4Rig()
    assert method4_label(list(rig.sender.paths.values())) == parallel(mc("sa"), mc("sb"))


def test_match_queue_ttl():
    q = MatchQueue(ttl=30)
    v = Validity(0, 10)
    a, b = uuid.UUID(int=1), uuid.UUID(int=2)
    assert q.put(a, PathId.SPACE, b"1", v, 0.0) is None
    assert q.put(a, PathId.SPACE, b"1", v, 0.1) is None  # duplicate half ignored
    assert q.put(b, PathId.GROUND, b"2", v, 10.0) is None
    assert q.purge(29.9) == 0
    assert q.purge(30.0) == 1 and q.losses == 1
    both = q.put(b, PathId.SPACE, b"3", v, 31.0)
    assert set(both) == {PathId.SPACE, PathId.GROUND}
    assert len(q) == 0


def test_block_codec():
    parts = [b"a", b"", b"ccc"]
    assert decode_block(encode_block(parts)) == parts
    with pytest.raises(ValueError):
        decode_block(encode_block(parts) + b"x")


# ------------------------------------------------------------------ all-or-nothing under faults


@settings(max_examples=20, deadline=None)
@given(st.floats(min_value=0.0, max_value=3.0), st.floats(min_value=0.0, max_value=40.0), st.integers(0, 99))
def test_method3_faults_converge(kill_at, outage, seed):
    rig = M3Rig(seed=seed, latency_ms=80)
    rig.sender.start(until=4.0)
    rig.sched.at(kill_at, rig.net.kill, "m3")
    rig.sched.at(kill_at + outage, rig.net.heal, "m3")
    rig.sched.run(until=300.0)
    assert rig.keys(rig.ss) == rig.keys(rig.sr)
    c = rig.sender.counters
    assert c.sent == c.delivered + c.lost


@settings(max_examples=20, deadline=None)
@given(
    st.sampled_from(["space", "ground"]),
    st.floats(min_value=0.0, max_value=3.0),
    st.floats(min_value=0.0, max_value=40.0),
    st.integers(0, 99),
)
def test_method4_faults_converge(path, kill_at, outage, seed):
    rig = M4Rig(seed=seed, block_size=5, ttl=10.0, jitter_ms=30)
    rig.sender.run(until=4.0)
    rig.sched.at(kill_at, rig.net.kill, path)
    rig.sched.at(kill_at + outage, rig.net.heal, path)
    rig.sched.run(until=400.0)
    assert rig.keys(rig.ss) == rig.keys(rig.sr)
    c = rig.sender.counters
    assert c.sent == c.delivered + c.lost
