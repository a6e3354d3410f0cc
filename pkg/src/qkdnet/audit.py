"""Post-run audits.

`audit_relays` reconciles two independent records of every relay: the
agents' event ledgers and the stores' own consumption logs.  A pad is a
link key spent as a one-time pad; each completed hop must account for
exactly one of them on both of its ends, no pad may serve twice, and no
relay id may be accepted twice.

`byte_uniformity` is a chi-square goodness-of-fit test of key bytes
against the uniform distribution.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy import stats

from .core import NodeId


@dataclass
class RelayAudit:
    relays: int = 0
    committed: int = 0
    aborted: int = 0
    completed_hops: int = 0
    pads_out: int = 0
    pads_in: int = 0
    pads_burned: int = 0
    pads_unresolved: int = 0
    pad_reuse: int = 0
    replay_accepted: int = 0
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return (
            self.pads_in == self.completed_hops
            and self.pad_reuse == 0
            and self.replay_accepted == 0
            and not self.problems
        )

    def as_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "problems"}
        out["problems"] = list(self.problems[:20])
        out["ok"] = self.ok
        return out


def _relay_reason(reason: str) -> tuple[str, str] | None:
    # "relay:<rid>:out" / ":in" / ":burned"
    parts = reason.split(":")
    if len(parts) != 3 or parts[0] != "relay":
        return None
    return parts[1], parts[2]


def audit_relays(agents: Mapping[NodeId, object], stores: Mapping[NodeId, object], handles: Iterable = ()) -> RelayAudit:
    a = RelayAudit()
    handles = list(handles)
    a.relays = len(handles)
    a.committed = sum(1 for h in handles if h.state == "committed")
    a.aborted = sum(1 for h in handles if h.state == "aborted")

    # ledger side
    wraps: dict[tuple, list[str]] = {}
    unwraps: Counter = Counter()
    stored: Counter = Counter()
    for agent in agents.values():
        for ev in agent.ledger:
            if ev["event"] == "wrap":
                wraps.setdefault((ev["link"], ev["pad"]), []).append(str(ev["rid"]))
            elif ev["event"] == "unwrap":
                a.completed_hops += 1
                unwraps[(ev["node"], str(ev["rid"]))] += 1
            elif ev["event"] == "store":
                stored[str(ev["rid"])] += 1
    for (link, pad), rids in wraps.items():
        if len(rids) > 1:
            a.pad_reuse += 1
            a.problems.append(f"pad {pad} on link {link} wrapped for {len(rids)} relays")
    for (node, rid), n in unwraps.items():
        if n > 1:
            a.replay_accepted += 1
            a.problems.append(f"{node} unwrapped relay {rid} {n} times")
    for rid, n in stored.items():
        if n > 1:
            a.replay_accepted += 1
            a.problems.append(f"relay {rid} stored {n} times")

    # store side, independent of the ledgers
    out_side: Counter = Counter()
    in_side: Counter = Counter()
    burned: set = set()
    for store in stores.values():
        for _, kid, supplier, reason in store.consumption_log:
            parsed = _relay_reason(reason)
            if parsed is None:
                continue
            key = (supplier, kid)
            if parsed[1] == "out":
                out_side[key] += 1
            elif parsed[1] == "in":
                in_side[key] += 1
            elif parsed[1] == "burned":
                burned.add(key)
    a.pads_out = len(out_side)
    a.pads_in = len(in_side)
    a.pads_burned = len(burned)
    for key, n in list(out_side.items()) + list(in_side.items()):
        if n > 1:
            a.pad_reuse += 1
            a.problems.append(f"pad {key[1]} of {key[0]} consumed {n} times on one side")
    for key in in_side:
        if key not in out_side:
            a.problems.append(f"pad {key[1]} unwrapped but never spent upstream")
    # every spent pad was unwrapped downstream, burned there, or is still in flight
    a.pads_unresolved = sum(1 for key in out_side if key not in in_side and key not in burned)

    # e2e ids: one stored copy per end, never more
    seen: Counter = Counter()
    for store in stores.values():
        for e in store.entries():
            if e.supplier_id.startswith("e2e:"):
                seen[e.key_id] += 1
    for kid, n in seen.items():
        if n != 2:
            a.replay_accepted += n > 2
            a.problems.append(f"e2e key {kid} present in {n} stores")
    committed_rids = {h.rid for h in handles if h.state == "committed"}
    if handles and committed_rids != set(seen):
        a.problems.append("committed relays and stored e2e keys differ")
    return a


def byte_uniformity(data: bytes | Iterable[bytes]) -> tuple[float, float]:
    """Chi-square statistic and p-value of byte values against uniform."""
    if not isinstance(data, (bytes, bytearray)):
        data = b"".join(data)
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    if arr.size < 5 * 256:
        raise ValueError("need at least 1280 bytes for a meaningful test")
    counts = np.bincount(arr, minlength=256)
    res = stats.chisquare(counts)
    return float(res.statistic), float(res.pvalue)
