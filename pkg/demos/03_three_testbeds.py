# %% [markdown]
# The bundled three-testbed deployment: five domains, four controllers and
# all four border methods.  Every pair of nodes asks for an end-to-end key.

# %%
from collections import Counter

from qkdnet import run_scenario
from qkdnet.cli import sample_config

script = {"duration": 90, "settle": 60,
          "actions": [{"at": 15, "action": "request_all_pairs", "spacing": 0.25, "deadline": 70}]}
report = run_scenario(sample_config(), script)
print(report.table())

# %% how far did keys travel?
reqs = report.data["e2e"]["requests"]
print("hop counts:", sorted(Counter(len(r["hops"]) - 1 for r in reqs).items()))
longest = max(reqs, key=lambda r: len(r["hops"]))
print("longest path:", " -> ".join(longest["hops"]))
print("label:", longest["label"])

# %% the key sits at both ends and nowhere else
dep = report.deployment
rid = longest["rid"]
holders = [str(n) for n, s in dep.stores.items() if any(row["key_id"] == rid for row in s.listing())]
print("holders:", holders)
print("relay audit:", report.data["relay_audit"])
