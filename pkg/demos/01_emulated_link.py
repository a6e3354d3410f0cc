# %% [markdown]
# One emulated QKD link between two nodes, run for a simulated minute.
# Both key stores should end up holding the same keys, about one per second.

# %%
import uuid

import numpy as np

from qkdnet.core import LinkDescriptor, LinkType, NodeId
from qkdnet.kms import KeyStore
from qkdnet.netsim import ChannelSpec, Mux, Network
from qkdnet.qkd_emu import LinkCredentials, emulate_link
from qkdnet.rng import Drbg

alice, bob = NodeId("lab", "alice"), NodeId("lab", "bob")
net = Network(seed=1)
sched = net.scheduler
clock = lambda: 1_700_000_000 + sched.now  # virtual unix time

ea, eb = net.open_channel(ChannelSpec("fiber", latency_ms=5), str(alice), str(bob))
ports = Mux(ea).port("link"), Mux(eb).port("link")
stores = KeyStore(alice, clock), KeyStore(bob, clock)

# 256 bit/s with 32-byte keys -> one key per second
link = LinkDescriptor(uuid.UUID(int=1), alice, bob, LinkType.QKD, 256, 32)
rng = Drbg(1)
creds = LinkCredentials.generate("kem-a", "sig-a", rng.fork("creds"))
a, b = emulate_link(link, ports, stores, creds, sched, rng.fork("keys"),
                    supplier_id="fiber", side_channels=["detector"], clock=clock)

# %%
sched.run(until=60.0)
ka = [(e.key_id, e.key.data) for e in stores[0].entries("fiber")]
kb = [(e.key_id, e.key.data) for e in stores[1].entries("fiber")]
print("keys at alice:", len(ka), " at bob:", len(kb), " identical:", ka == kb)
print("label:", stores[0].entries("fiber")[0].label)

# %% arrival times are evenly spaced
gaps = np.diff([e.validity.start for e in stores[1].entries("fiber")])
print("validity start gaps (s): mean %.2f  max %d" % (gaps.mean(), gaps.max()))

# %% a short outage: nothing diverges, the sender backs off
net.kill("fiber")
sched.run(until=70.0)
net.heal("fiber")
sched.run(until=100.0)
print("after outage:", len(stores[0].entries("fiber")), len(stores[1].entries("fiber")), a.stats)
