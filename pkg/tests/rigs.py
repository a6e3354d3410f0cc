"""Small deployments shared by the border, forwarding and acceptance tests."""

import uuid

from qkdnet import crypto
from qkdnet.border import (
    KemKeys,
    Method3Receiver,
    Method3Sender,
    Method4Receiver,
    Method4Sender,
    PathConfig,
    SenderProfile,
    SigKeys,
    method3_label,
)
from qkdnet.core import LinkDescriptor, LinkType, NodeId, PathId
from qkdnet.kms import KeyStore
from qkdnet.netsim import ChannelSpec, Mux, Network
from qkdnet.qkd_emu import LinkCredentials, emulate_link
from qkdnet.rng import Drbg

EPOCH = 1_700_000_000
SENDER, RECEIVER = NodeId("berlin", "gw"), NodeId("munich", "gw")


class Base:
    def __init__(self, seed):
        self.rng = Drbg(seed)
        self.net = Network(seed=seed)
        self.sched = self.net.scheduler
        self.clock = lambda: EPOCH + self.sched.now

    def store(self, node):
        return KeyStore(node, self.clock)

    def ports(self, cid, a, b, stream, **spec):
        ea, eb = self.net.open_channel(ChannelSpec(cid, **spec), str(a), str(b))
        return Mux(ea).port(stream), Mux(eb).port(stream)


class LinkPair(Base):
    """Two border stores joined by one or more emulated links."""

    def __init__(self, seed=1, links=(("l1", LinkType.QKD, 256, "kem-a", "sig-a", ("s1",)),), latency_ms=20):
        super().__init__(seed)
        self.a, self.b = NodeId("x", "a"), NodeId("y", "b")
        self.sa, self.sb = self.store(self.a), self.store(self.b)
        self.sessions = {}
        for i, (name, lt, rate, kem, sig, tags) in enumerate(links):
            link = LinkDescriptor(uuid.UUID(int=i + 1), self.a, self.b, lt, rate, 32)
            ports = self.ports(name, self.a, self.b, "link", latency_ms=latency_ms)
            creds = LinkCredentials.generate(kem, sig, self.rng.fork("creds" + name))
            self.sessions[name] = emulate_link(
                link, ports, (self.sa, self.sb), creds, self.sched, self.rng.fork(name),
                supplier_id=name, side_channels=tags, clock=self.clock,
            )

    def stop(self):
        for a, _ in self.sessions.values():
            a.stop()


class M3Rig(Base):
    def __init__(self, seed=3, mode="a", latency_ms=20, timeout=10.0, tags=(("ia",), ("ib",))):
        super().__init__(seed)
        self.label = method3_label(tags, mode)
        self.ss, self.sr = self.store(SENDER), self.store(RECEIVER)
        self.kems = [KemKeys.generate("kem-a", self.rng), KemKeys.generate("kem-b", self.rng)]
        self.sigs = [SigKeys.generate("sig-a", self.rng), SigKeys.generate("sig-b", self.rng)]
        self.ps, self.pr = self.ports("m3", SENDER, RECEIVER, "m3", latency_ms=latency_ms)
        self.sender = Method3Sender(
            SENDER, RECEIVER, self.ps, self.ss, self.sched, self.rng.fork("send"),
            [KemKeys(k.suite, k.public, b"") for k in self.kems], self.sigs,
            supplier_id="m3", label=self.label, mode=mode, rate_bps=256, timeout=timeout, clock=self.clock,
        )
        self.receiver = Method3Receiver(RECEIVER, self.sr, self.kems, mode=mode)
        profile = SenderProfile(SENDER, str(SENDER), tuple((s.suite, s.public) for s in self.sigs))
        self.receiver.register_sender(profile, "m3", self.label)
        self.receiver.attach(self.pr)

    def keys(self, store):
        return {(e.key_id, e.key.data) for e in store.entries("m3")}


class M4Rig(Base):
    def __init__(
        self, seed=4, space_ms=600, ground_ms=50, block_size=50, sessions=1, ttl=30.0,
        psk=b"", kdf="xor", jitter_ms=0.0,
    ):
        super().__init__(seed)
        self.ss, self.sr = self.store(SENDER), self.store(RECEIVER)
        self.space = PathConfig(PathId.SPACE, KemKeys.generate("kem-a", self.rng), SigKeys.generate("sig-a", self.rng), ("sa",))
        self.ground = PathConfig(PathId.GROUND, KemKeys.generate("kem-b", self.rng), SigKeys.generate("sig-b", self.rng), ("sb",))
        public = [
            PathConfig(p.path, KemKeys(p.kem.suite, p.kem.public, b""), p.sig, p.side_channels)
            for p in (self.space, self.ground)
        ]
        sp = self.ports("space", SENDER, RECEIVER, "m4", latency_ms=space_ms, jitter_ms=jitter_ms)
        gp = self.ports("ground", SENDER, RECEIVER, "m4", latency_ms=ground_ms, jitter_ms=jitter_ms)
        self.psk = crypto.Psk(psk)
        self.sender = Method4Sender(
            SENDER, RECEIVER, {PathId.SPACE: sp[0], PathId.GROUND: gp[0]}, self.ss, self.sched,
            self.rng.fork("send"), public, supplier_id="m4", psk=self.psk, kdf=kdf,
            block_size=block_size, ttl=ttl, sessions=sessions, clock=self.clock,
        )
        receiver_paths = [
            PathConfig(p.path, p.kem, SigKeys(p.sig.suite, p.sig.public, b""), p.side_channels)
            for p in (self.space, self.ground)
        ]
        self.receiver = Method4Receiver(RECEIVER, self.sr, self.sched, receiver_paths, psk=self.psk, kdf=kdf, ttl=ttl)
        profile = SenderProfile(SENDER, str(SENDER), ((self.space.sig.suite, self.space.sig.public),
                                                      (self.ground.sig.suite, self.ground.sig.public)))
        self.receiver.register_sender(profile, "m4")
        self.receiver.attach({PathId.SPACE: sp[1], PathId.GROUND: gp[1]})

    def keys(self, store):
        return {(e.key_id, e.key.data) for e in store.entries("m4")}


class Chain(Base):
    """Relay agents over hand-loaded pads.

    `edges` are (i, j) index pairs into `nodes`; each edge gets `pads` keys
    in each direction, loaded identically into both stores.  Edges whose
    endpoints sit in different controllers become border pairs.
    """

    def __init__(self, nodes, edges, pads=4, seed=7, latency_ms=10, controllers=None, label_tags=("c",)):
        from qkdnet.core import KeyEntry, KeyMaterial, Validity
        from qkdnet.forwarding import BorderPair, Controller, Federation, RelayAgent, TopologyLink
        from qkdnet.kms.store import owns
        from qkdnet.seclevel import its

        super().__init__(seed)
        self.nodes = list(nodes)
        self.stores = {n: self.store(n) for n in self.nodes}
        self.links = {}
        validity = Validity(EPOCH, EPOCH + 10**6)
        for k, (i, j) in enumerate(edges):
            a, b = self.nodes[i], self.nodes[j]
            desc = LinkDescriptor(uuid.UUID(int=k + 1), a, b, LinkType.QKD, 256, 32)
            supplier = f"link:{k}"
            self.links[desc.link_id] = TopologyLink(desc, supplier)
            self.stores[a].register_supplier(supplier, b)
            self.stores[b].register_supplier(supplier, a)
            for owner, other in ((a, b), (b, a)):
                made = 0
                while made < pads:
                    kid = uuid.UUID(bytes=self.rng.bytes(16))
                    if not owns(owner, other, kid):
                        continue
                    mat = KeyMaterial(self.rng.bytes(32))
                    self.stores[a].push_key(supplier, KeyEntry(kid, mat, b, supplier, validity, its(*label_tags)))
                    self.stores[b].push_key(supplier, KeyEntry(kid, mat, a, supplier, validity, its(*label_tags)))
                    made += 1
        self.agents = {n: RelayAgent(n, self.stores[n], self.sched, self.links) for n in self.nodes}
        for k, (i, j) in enumerate(edges):
            a, b = self.nodes[i], self.nodes[j]
            pa, pb = self.ports(f"relay:{k}", a, b, "relay", latency_ms=latency_ms)
            self.agents[a].connect(b, pa)
            self.agents[b].connect(a, pb)
        groups = controllers or {d: [d] for d in sorted({n.domain for n in self.nodes})}
        owner = {d: name for name, doms in groups.items() for d in doms}
        ctrls, pairs = [], []
        for name, doms in groups.items():
            inside = [tl for tl in self.links.values()
                      if all(owner[n.domain] == name for n in tl.desc.endpoints())]
            borders = [n for tl in self.links.values() for n in tl.desc.endpoints()
                       if owner[n.domain] == name and owner[tl.desc.other(n).domain] != name]
            ctrls.append(Controller(name, doms, inside, self.stores, borders))
        for tl in self.links.values():
            a, b = tl.desc.endpoints()
            if owner[a.domain] != owner[b.domain]:
                pairs.append(BorderPair(tl, 1))
        self.controllers = {c.name: c for c in ctrls}
        self.federation = Federation(ctrls, pairs, self.agents, self.rng.fork("fed"))

    def request(self, src, dst, **kw):
        return self.federation.request_e2e_key("t", self.nodes[src], self.nodes[dst], **kw)

    def e2e(self, node):
        return {(e.key_id, e.key.data) for e in self.stores[node].entries() if e.supplier_id.startswith("e2e:")}
