# %% [markdown]
# Security labels: a base (ITS above MC) minus the side channels that can
# break it.  Parallel composition keeps the strongest guarantee, serial
# composition the weakest.

# %%
from qkdnet.seclevel import Base, SecurityLabel, its, label_with_pqc_auth, mc, parallel, serial

qkd_a, qkd_b = its("detector", "fiber-tap"), its("detector", "laser")
print("two QKD links in parallel :", parallel(qkd_a, qkd_b))
print("QKD then PQC hop          :", serial(qkd_a, mc("impl")))
print("QKD || PQC                :", parallel(qkd_a, mc("impl")))
print("QKD with PQC auth         :", label_with_pqc_auth(SecurityLabel(Base.ITS, {"detector", "fiber-tap"})))

# %% a relay path is serial over its hops; one weak hop drags the whole key down
hops = [its("d1"), its("d2"), mc("kem-impl"), its("d3")]
label = hops[0]
for h in hops[1:]:
    label = serial(label, h)
print("four-hop relay            :", label)

# %% parallel is not associative once bases mix
x, y, z = its("x"), mc("x"), mc("y")
print("(x || y) || z =", parallel(parallel(x, y), z))
print("x || (y || z) =", parallel(x, parallel(y, z)))
