# %% [markdown]
# The four ways two gateways in different domains agree on keys.
# Methods 1 and 2 XOR two parallel link streams; method 3 sends one package
# sealed under two KEMs; method 4 splits each key over a slow and a fast path.

# %%
import uuid

from qkdnet import crypto
from qkdnet.border import (
    KemKeys, Method3Receiver, Method3Sender, Method4Receiver, Method4Sender, PathConfig,
    SenderProfile, SigKeys, method1_bridge, method3_label,
)
from qkdnet.core import LinkDescriptor, LinkType, NodeId, PathId
from qkdnet.kms import KeyStore
from qkdnet.netsim import ChannelSpec, Mux, Network
from qkdnet.qkd_emu import LinkCredentials, emulate_link
from qkdnet.rng import Drbg

EPOCH = 1_700_000_000
gw1, gw2 = NodeId("east", "gw"), NodeId("west", "gw")


def world(seed):
    net = Network(seed=seed)
    clock = lambda: EPOCH + net.scheduler.now
    return net, net.scheduler, clock, Drbg(seed), KeyStore(gw1, clock), KeyStore(gw2, clock)


def ports(net, name, stream, **spec):
    ea, eb = net.open_channel(ChannelSpec(name, **spec), str(gw1), str(gw2))
    return Mux(ea).port(stream), Mux(eb).port(stream)


def keys(store, supplier):
    return {(e.key_id, e.key.data) for e in store.entries(supplier)}


# %% method 1: two QKD links, XORed
net, sched, clock, rng, s1, s2 = world(1)
for i, tag in enumerate(["q1", "q2"]):
    desc = LinkDescriptor(uuid.UUID(int=i + 1), gw1, gw2, LinkType.QKD, 256, 32)
    emulate_link(desc, ports(net, tag, "link", latency_ms=5), (s1, s2),
                 LinkCredentials.generate("kem-a", "sig-a", rng.fork(tag)), sched, rng.fork("k" + tag),
                 supplier_id=tag, side_channels=[tag, "shared"], clock=clock)
b1, b2 = method1_bridge(s1, s2, ["q1", "q2"])
sched.run(until=30.0)
print("method 1:", len(keys(s1, b1.supplier_id)), "keys, same:",
      keys(s1, b1.supplier_id) == keys(s2, b2.supplier_id), "label:", s1.entries(b1.supplier_id)[0].label)

# %% method 3: one package, two KEMs, two signatures
net, sched, clock, rng, s1, s2 = world(3)
kems = [KemKeys.generate("kem-a", rng), KemKeys.generate("kem-b", rng)]
sigs = [SigKeys.generate("sig-a", rng), SigKeys.generate("sig-b", rng)]
label = method3_label([["impl-a"], ["impl-b"]], "a")
pa, pb = ports(net, "wan", "m3", latency_ms=30)
sender = Method3Sender(gw1, gw2, pa, s1, sched, rng.fork("s"), [KemKeys(k.suite, k.public, b"") for k in kems],
                       sigs, supplier_id="m3", label=label, clock=clock)
receiver = Method3Receiver(gw2, s2, kems)
receiver.register_sender(SenderProfile(gw1, str(gw1), tuple((s.suite, s.public) for s in sigs)), "m3", label)
receiver.attach(pb)
sender.send(10)
sched.run(until=5.0)
print("method 3:", len(keys(s2, "m3")), "keys, same:", keys(s1, "m3") == keys(s2, "m3"), "label:", label)

# %% method 4: space (600 ms) and ground (50 ms) halves, combined at the receiver
net, sched, clock, rng, s1, s2 = world(4)
space = PathConfig(PathId.SPACE, KemKeys.generate("kem-a", rng), SigKeys.generate("sig-a", rng), ("sat",))
ground = PathConfig(PathId.GROUND, KemKeys.generate("kem-b", rng), SigKeys.generate("sig-b", rng), ("inet",))
sp, gp = ports(net, "space", "m4", latency_ms=600), ports(net, "ground", "m4", latency_ms=50)
psk = crypto.Psk(b"shared secret")
sender = Method4Sender(
    gw1, gw2, {PathId.SPACE: sp[0], PathId.GROUND: gp[0]}, s1, sched, rng.fork("s"),
    [PathConfig(p.path, KemKeys(p.kem.suite, p.kem.public, b""), p.sig) for p in (space, ground)],
    supplier_id="m4", psk=psk, block_size=50, clock=clock,
)
receiver = Method4Receiver(gw2, s2, sched, [PathConfig(p.path, p.kem, SigKeys(p.sig.suite, p.sig.public, b""), p.side_channels)
                                            for p in (space, ground)], psk=psk)
receiver.register_sender(SenderProfile(gw1, str(gw1), ((space.sig.suite, space.sig.public),
                                                      (ground.sig.suite, ground.sig.public))), "m4")
receiver.attach({PathId.SPACE: sp[1], PathId.GROUND: gp[1]})
sender.run(until=10.0)
sched.run(until=10.0)
print("method 4: %.1f keys/s, same: %s" % (len(keys(s2, "m4")) / 10, keys(s1, "m4") <= keys(s2, "m4")))

# %% cut the ground path: space halves wait, expire, nothing is stored
sched.run(until=20.0)
net.kill("ground")
before = len(keys(s2, "m4"))
sender.run(until=30.0)
sched.run(until=90.0)
print("ground down: new keys", len(keys(s2, "m4")) - before, " unmatched halves lost", receiver.losses)
