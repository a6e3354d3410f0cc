"""One-process deployment over netsim, scripted runs and their reports.

`Deployment` instantiates every node store, emulated link, border method,
relay agent and controller of a `DeploymentConfig` on one virtual clock.
`run_scenario` drives it with a `Script`:

1. key generators run for ``duration`` seconds while timed actions fire;
2. generators stop and the network runs ``settle`` more seconds so that
   in-flight handshakes, retransmissions and retries conclude;
3. the report is assembled from store contents and counters.

The report holds no wall-clock data, so equal seeds give equal bytes.
"""

from __future__ import annotations

import itertools
import json
import logging
import statistics
from dataclasses import dataclass, field
from typing import Iterator

from . import crypto
from .audit import audit_relays
from .border import (
    KemKeys,
    Method3Receiver,
    Method3Sender,
    Method4Receiver,
    Method4Sender,
    PathConfig,
    SenderProfile,
    SigKeys,
    method1_bridge,
    method2_bridge,
    method3_label,
)
from .config import (
    BorderConf,
    ConfigError,
    DeploymentConfig,
    LinkConf,
    Script,
    check_script,
    load_config,
    load_script,
)
from .core import KeyId, LinkDescriptor, LinkType, NodeId, PathId, ValidationError
from .forwarding import (
    BorderPair,
    Controller,
    Federation,
    RelayAgent,
    RelayHandle,
    TopologyLink,
    UnreachableError,
)
from .kms import KmsClient, KmsError, KeyStore, hybrid_supplier_id
from .netsim import ChannelSpec, Mux, Network, Scheduler
from .qkd_emu import LinkCredentials, LinkSession, emulate_link
from .rng import Drbg

log = logging.getLogger(__name__)

RETRY_INTERVAL = 1.0
DEFAULT_DEADLINE = 60.0
DEFAULT_SPACING = 0.25


class ScenarioError(RuntimeError):
    pass


def _r(x: float | None, nd: int = 6) -> float | None:
    return None if x is None else round(float(x), nd)


def _stream(store: KeyStore, supplier: str) -> set[tuple[KeyId, bytes]]:
    return {(e.key_id, e.key.data) for e in store.entries(supplier)}


@dataclass
class E2ERequest:
    index: int
    source: NodeId
    destination: NodeId
    length: int
    app: str
    requested: float
    deadline: float
    state: str = "pending"
    attempts: int = 0
    relays: int = 0
    rid: KeyId | None = None
    label: str = ""
    hops: tuple[str, ...] = ()
    finished: float | None = None
    relay_latency: float | None = None
    last_error: str = ""

    def as_dict(self) -> dict:
        return {
            "index": self.index,
            "source": str(self.source),
            "destination": str(self.destination),
            "length": self.length,
            "app": self.app,
            "state": self.state,
            "attempts": self.attempts,
            "relays": self.relays,
            "rid": None if self.rid is None else str(self.rid),
            "label": self.label,
            "hops": list(self.hops),
            "requested": _r(self.requested),
            "latency": _r(None if self.finished is None else self.finished - self.requested),
            "relay_latency": _r(self.relay_latency),
            "last_error": self.last_error,
        }


# --------------------------------------------------------------------------
# deployment


class Deployment:
    """Everything a config describes, wired on one scheduler."""

    def __init__(self, config: DeploymentConfig, *, seed: int | None = None, wall_clock: bool = False) -> None:
        self.config = cfg = config if seed is None else config.with_seed(seed)
        self.rng = Drbg(cfg.seed)
        self.scheduler = Scheduler(wall_clock=wall_clock)
        self.net = Network(self.scheduler, seed=cfg.seed)
        self.clock = lambda: cfg.epoch + self.scheduler.now
        self.stores = {
            n: KeyStore(n, self.clock, rng=self.rng.fork(f"store:{n}")) for n in cfg.nodes
        }
        self.link_confs: dict[str, LinkConf] = {}
        self.links: dict[str, tuple[LinkSession, LinkSession]] = {}
        self.topology: dict[str, TopologyLink] = {}  # intra links by name, borders by border name
        self.bridges: dict[str, tuple] = {}
        self.m3: dict[str, tuple[Method3Sender, Method3Receiver]] = {}
        self.m4: dict[str, tuple[Method4Sender, Method4Receiver]] = {}
        self.border_suppliers: dict[str, str] = {}
        self.generation_window = 0.0
        self._build()

    # ------------------------------------------------------------ building

    def _mux_pair(self, spec: ChannelSpec, a: NodeId, b: NodeId) -> tuple[Mux, Mux]:
        ea, eb = self.net.open_channel(spec, str(a), str(b))
        return Mux(ea), Mux(eb)

    def _emulate(self, lc: LinkConf) -> str:
        desc = LinkDescriptor(lc.link_id, lc.a, lc.b, lc.link_type, lc.rate_bps, lc.key_len)
        ma, mb = self._mux_pair(lc.channel, lc.a, lc.b)
        creds = LinkCredentials.generate(lc.kem, lc.sig, self.rng.fork(f"creds:{lc.name}"))
        supplier = f"link:{lc.name}"
        sessions = emulate_link(
            desc, (ma.port("link"), mb.port("link")), (self.stores[lc.a], self.stores[lc.b]),
            creds, self.scheduler, self.rng.fork(f"link:{lc.name}"),
            supplier_id=supplier, side_channels=lc.side_channels, clock=self.clock,
        )
        self.link_confs[lc.name] = lc
        self.links[lc.name] = sessions
        return supplier

    def _build(self) -> None:
        cfg = self.config
        for lc in cfg.links:
            supplier = self._emulate(lc)
            desc = LinkDescriptor(lc.link_id, lc.a, lc.b, lc.link_type, lc.rate_bps, lc.key_len)
            self.topology[lc.name] = TopologyLink(desc, supplier)
        border_links: dict[str, tuple[TopologyLink, int]] = {}
        for bc in cfg.borders:
            supplier = {1: self._build_bridge, 2: self._build_bridge, 3: self._build_m3, 4: self._build_m4}[
                bc.method
            ](bc)
            link_type = LinkType.QKD if bc.method == 1 else LinkType.PQC
            desc = LinkDescriptor(bc.link_id, bc.a, bc.b, link_type, bc.rate_bps, bc.key_len)
            border_links[bc.name] = (TopologyLink(desc, supplier), bc.method)
            self.border_suppliers[bc.name] = supplier

        controllers, owner = [], {}
        for cc in cfg.controllers:
            doms = set(cc.domains)
            links = [tl for tl in self.topology.values() if tl.desc.endpoint_a.domain in doms]
            # a border agreement inside one controller's reach is just another link to it
            links += [tl for tl, _ in border_links.values()
                      if tl.desc.endpoint_a.domain in doms and tl.desc.endpoint_b.domain in doms]
            borders = [n for d in cfg.domains if d.name in doms for n in d.borders]
            controllers.append(Controller(cc.name, cc.domains, links, self.stores, borders))
            for d in cc.domains:
                owner[d] = cc.name
        pairs = [
            BorderPair(tl, method) for tl, method in border_links.values()
            if owner[tl.desc.endpoint_a.domain] != owner[tl.desc.endpoint_b.domain]
        ]
        all_links = {tl.link_id: tl for tl in self.topology.values()}
        all_links.update({tl.link_id: tl for tl, _ in border_links.values()})
        self.controllers = controllers
        self.agents = {
            n: RelayAgent(n, self.stores[n], self.scheduler, all_links) for n in cfg.nodes
        }
        adjacent: list[tuple[NodeId, NodeId]] = []
        for tl in all_links.values():
            pair = tuple(sorted(tl.desc.endpoints()))
            if pair not in adjacent:
                adjacent.append(pair)
        relay = dict(cfg.relay_channel)
        for lo, hi in adjacent:
            spec = ChannelSpec(f"relay:{lo}~{hi}", **relay)
            ma, mb = self._mux_pair(spec, lo, hi)
            self.agents[lo].connect(hi, ma.port("relay"))
            self.agents[hi].connect(lo, mb.port("relay"))
        self.federation = Federation(controllers, pairs, self.agents, self.rng.fork("federation"))

    def _build_bridge(self, bc: BorderConf) -> str:
        suppliers = [self._emulate(lc) for lc in bc.links]
        sa, sb = self.stores[bc.a], self.stores[bc.b]
        if bc.method == 1:
            pair = method1_bridge(sa, sb, suppliers, bc.key_len)
        else:
            pair = method2_bridge(sa, sb, suppliers, [(lc.kem, lc.sig) for lc in bc.links], bc.key_len)
        self.bridges[bc.name] = pair
        return hybrid_supplier_id(suppliers)

    def _build_m3(self, bc: BorderConf) -> str:
        rng = self.rng.fork(f"m3:{bc.name}")
        kems = [KemKeys.generate(k, rng.fork(f"kem{i}")) for i, (k, _) in enumerate(bc.suites)]
        sigs = [SigKeys.generate(s, rng.fork(f"sig{i}")) for i, (_, s) in enumerate(bc.suites)]
        supplier = f"m3:{bc.name}"
        label = method3_label(bc.suite_side_channels, bc.mode)
        ma, mb = self._mux_pair(bc.channel, bc.a, bc.b)
        sender = Method3Sender(
            bc.a, bc.b, ma.port("m3"), self.stores[bc.a], self.scheduler, rng.fork("sender"),
            [KemKeys(k.suite, k.public, b"") for k in kems], sigs,
            supplier_id=supplier, label=label, mode=bc.mode, key_len=bc.key_len,
            rate_bps=bc.rate_bps, clock=self.clock,
        )
        receiver = Method3Receiver(bc.b, self.stores[bc.b], kems, mode=bc.mode, key_len=bc.key_len)
        profile = SenderProfile(bc.a, str(bc.a), tuple((s.suite, s.public) for s in sigs))
        receiver.register_sender(profile, supplier, label, rate_bps=bc.rate_bps)
        receiver.attach(mb.port("m3"))
        self.m3[bc.name] = (sender, receiver)
        return supplier

    def _build_m4(self, bc: BorderConf) -> str:
        rng = self.rng.fork(f"m4:{bc.name}")
        supplier = f"m4:{bc.name}"
        send_paths, recv_paths, publics = [], [], {}
        ports_a: dict[PathId, object] = {}
        ports_b: dict[PathId, object] = {}
        for pc in bc.paths:
            tag = pc.path.name.lower()
            kem = KemKeys.generate(pc.kem, rng.fork(f"kem:{tag}"))
            sig = SigKeys.generate(pc.sig, rng.fork(f"sig:{tag}"))
            send_paths.append(PathConfig(pc.path, KemKeys(kem.suite, kem.public, b""), sig, pc.side_channels))
            recv_paths.append(PathConfig(pc.path, kem, SigKeys(sig.suite, sig.public, b""), pc.side_channels))
            publics[pc.path] = (sig.suite, sig.public)
            ma, mb = self._mux_pair(pc.channel, bc.a, bc.b)
            ports_a[pc.path], ports_b[pc.path] = ma.port("m4"), mb.port("m4")
        psk = crypto.Psk(bc.psk)
        sender = Method4Sender(
            bc.a, bc.b, ports_a, self.stores[bc.a], self.scheduler, rng.fork("sender"), send_paths,
            supplier_id=supplier, psk=psk, kdf=bc.kdf, block_size=bc.block_size, key_len=bc.key_len,
            ttl=bc.ttl, sessions=bc.sessions, clock=self.clock,
        )
        receiver = Method4Receiver(
            bc.b, self.stores[bc.b], self.scheduler, recv_paths, psk=psk, kdf=bc.kdf, ttl=bc.ttl,
            key_len=bc.key_len,
        )
        profile = SenderProfile(bc.a, str(bc.a), (publics[PathId.SPACE], publics[PathId.GROUND]))
        receiver.register_sender(profile, supplier)
        receiver.attach(ports_b)
        self.m4[bc.name] = (sender, receiver)
        return supplier

    # ------------------------------------------------------------ control

    def start_generators(self, until: float) -> None:
        """Run every key source until virtual time `until`."""
        self.generation_window = until - self.scheduler.now
        for sender, _ in self.m3.values():
            sender.start(until=until)
        for name, (sender, _) in self.m4.items():
            bc = next(b for b in self.config.borders if b.name == name)
            sender.run(blocks=bc.blocks, until=until)
        self.scheduler.at(until, self.stop_generators)

    def stop_generators(self) -> None:
        for a, b in self.links.values():
            a.stop()
            b.stop()
        for sender, _ in self.m3.values():
            sender.stop()
        for sender, _ in self.m4.values():
            sender.stop()

    def node(self, text: str | NodeId) -> NodeId:
        try:
            node = text if isinstance(text, NodeId) else NodeId.parse(str(text))
        except ValidationError as exc:
            raise ScenarioError(str(exc)) from None
        if node not in self.stores:
            raise ScenarioError(f"unknown node {node}")
        return node

    def inspect_store(self, node: str | NodeId) -> list[dict]:
        """key_id, supplier, peer, label and consumed flag of every key at `node`."""
        return self.stores[self.node(node)].listing()

    def tail_trace(self, n: int | None = None) -> Iterator[str]:
        lines = self.net.trace if n is None else self.net.trace[-n:]
        yield from lines

    def channel_ids(self) -> set[str]:
        return set(self.net.channels)


# --------------------------------------------------------------------------
# running


class Runner:
    def __init__(self, deployment: Deployment, script: Script) -> None:
        self.d = deployment
        self.script = script
        self.requests: list[E2ERequest] = []
        self.drains: list[dict] = []
        self.events: list[dict] = []

    def run(self) -> "Report":
        d, s = self.d, self.script
        check_script(s, d.config, d.channel_ids())
        d.start_generators(s.duration)
        for act in s.actions:
            d.scheduler.at(act.at, self._dispatch, act)
        d.scheduler.run(until=s.duration + s.settle)
        return build_report(self)

    def _dispatch(self, act) -> None:
        a, d = act.args, self.d
        now = d.scheduler.now
        self.events.append({"t": _r(now), "action": act.kind, **{k: a[k] for k in sorted(a)}})
        if act.kind == "request_e2e_key":
            self.request(d.node(a["source"]), d.node(a["destination"]), a.get("length"),
                         a.get("app", ""), a.get("deadline", DEFAULT_DEADLINE))
        elif act.kind == "request_all_pairs":
            spacing = a.get("spacing", DEFAULT_SPACING)
            nodes = d.config.nodes
            for i, (x, y) in enumerate(itertools.combinations(nodes, 2)):
                src, dst = (x, y) if i % 2 == 0 else (y, x)
                d.scheduler.after(
                    i * spacing, self.request, src, dst, a.get("length"), f"pair{i}",
                    a.get("deadline", DEFAULT_DEADLINE),
                )
        elif act.kind == "kill":
            d.net.kill(a["channel"])
        elif act.kind == "heal":
            d.net.heal(a["channel"])
        elif act.kind == "kill_node":
            d.net.kill_node(str(d.node(a["node"])))
        elif act.kind == "heal_node":
            d.net.heal_node(str(d.node(a["node"])))
        elif act.kind == "drain":
            self.drain(d.node(a["node"]), d.node(a["peer"]), a["supplier"], a.get("number"))

    # ------------------------------------------------------------ e2e

    def request(self, source: NodeId, destination: NodeId, length: int | None, app: str, deadline: float) -> E2ERequest:
        now = self.d.scheduler.now
        req = E2ERequest(
            len(self.requests), source, destination, length or self.d.config.key_len, app or f"req{len(self.requests)}",
            now, now + deadline,
        )
        self.requests.append(req)
        self._attempt(req)
        return req

    def _attempt(self, req: E2ERequest) -> None:
        sched = self.d.scheduler
        req.attempts += 1

        def done(h: RelayHandle) -> None:
            if h.state == "committed":
                req.state = "committed"
                req.rid = h.rid
                req.label = str(h.label)
                req.hops = tuple(str(n) for n in h.path.hops)
                req.finished = h.finished
                req.relay_latency = h.latency
            else:
                req.last_error = f"relay aborted: {h.reason}"
                self._retry(req)

        try:
            _, handle = self.d.federation.request_e2e_key(req.app, req.source, req.destination, req.length, done)
        except UnreachableError as exc:
            req.last_error = str(exc)
            self._retry(req)
            return
        req.relays += 1
        log.debug("t=%.3f %s: relay %s over %s", sched.now, req.app, handle.rid, handle.path.hops)

    def _retry(self, req: E2ERequest) -> None:
        sched = self.d.scheduler
        if sched.now + RETRY_INTERVAL > req.deadline:
            req.state = "failed"
            req.finished = sched.now
            return
        sched.after(RETRY_INTERVAL, self._attempt, req)

    # ------------------------------------------------------------ drain

    def drain(self, node: NodeId, peer: NodeId, supplier: str, number: int | None) -> dict:
        """Fetch keys at `node` (master) and the same ids at `peer` (slave) through the KMS protocol."""
        store, other = self.d.stores[node], self.d.stores[peer]
        rec = {"t": _r(self.d.scheduler.now), "node": str(node), "peer": str(peer), "supplier": supplier,
               "requested": number, "drained": 0, "matched": False, "error": ""}
        self.drains.append(rec)
        info = next((s for s in store.suppliers(peer) if s.supplier_id == supplier), None)
        if info is None:
            rec["error"] = f"{node} has no supplier {supplier!r} towards {peer}"
            return rec
        n = number if number is not None else store.available(peer, supplier, info.key_len, owned=True)
        rec["requested"] = n
        if n == 0:
            rec["matched"] = True
            return rec
        try:
            keys = KmsClient.loopback(store).get_key_014(peer, n, info.key_len, [supplier])
            mirror = KmsClient.loopback(other).get_key_with_ids(node, [k for k, _ in keys], [supplier])
        except KmsError as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
            return rec
        rec["drained"] = len(keys)
        rec["matched"] = [(k, m.data) for k, m in keys] == [(k, m.data) for k, m in mirror]
        return rec


# --------------------------------------------------------------------------
# report


def _stats(values: list[float]) -> dict:
    if not values:
        return {"count": 0, "mean": None, "median": None, "max": None}
    return {"count": len(values), "mean": _r(statistics.fmean(values)),
            "median": _r(statistics.median(values)), "max": _r(max(values))}


def _reconciles(c: dict) -> bool:
    return c["sent"] == c["delivered"] + c["lost"] + c["pending"] and c["pending"] >= 0


def build_report(runner: Runner) -> "Report":
    d, script = runner.d, runner.script
    cfg = d.config
    window = d.generation_window or script.duration
    checks: dict[str, bool] = {}
    blocks: list[dict] = []  # every counter block, for reconciliation

    links = []
    for name, (sa, sb) in d.links.items():
        lc = d.link_confs[name]
        ea, eb = _stream(d.stores[lc.a], sa.supplier_id), _stream(d.stores[lc.b], sb.supplier_id)
        c = sa.coordinator.counters
        counters = {"sent": c.begun, "delivered": c.committed, "lost": c.aborted, "pending": c.pending}
        blocks.append(counters)
        links.append({
            "name": name, "a": str(lc.a), "b": str(lc.b), "type": lc.link_type.name,
            "rate_bps": lc.rate_bps, "key_len": lc.key_len, "label": str(sa.label),
            "keys_a": len(ea), "keys_b": len(eb), "identical": ea == eb,
            "measured_bps": _r(min(len(ea), len(eb)) * 8 * lc.key_len / window, 3),
            "keys_per_min": _r(min(len(ea), len(eb)) * 60 / window, 3),
            "counters": {f"{lc.a}>{lc.b}": counters},
            "dos": sb.stats.dos, "replays": sb.stats.replays,
        })

    borders = []
    for bc in cfg.borders:
        sup = d.border_suppliers[bc.name]
        ea, eb = _stream(d.stores[bc.a], sup), _stream(d.stores[bc.b], sup)
        row = {
            "name": bc.name, "method": bc.method, "a": str(bc.a), "b": str(bc.b), "supplier": sup,
            "link_id": str(bc.link_id), "keys_a": len(ea), "keys_b": len(eb), "identical": ea == eb,
            "keys_per_s": _r(min(len(ea), len(eb)) / window, 3),
        }
        entries = d.stores[bc.a].entries(sup)
        row["label"] = str(entries[0].label) if entries else None
        if bc.method in (1, 2):
            ba, bb = d.bridges[bc.name]
            row["streams"] = [f"link:{lc.name}" for lc in bc.links]
            row["bridged"] = {str(bc.a): ba.produced, str(bc.b): bb.produced}
            row["counters"] = {}
            for lc in bc.links:
                key = f"{lc.a}>{lc.b}"
                c = d.links[lc.name][0].coordinator.counters
                cur = row["counters"].setdefault(key, {"sent": 0, "delivered": 0, "lost": 0, "pending": 0})
                cur["sent"] += c.begun
                cur["delivered"] += c.committed
                cur["lost"] += c.aborted
                cur["pending"] += c.pending
            blocks.extend(row["counters"].values())
            row["dos"] = sum(d.links[lc.name][1].stats.dos for lc in bc.links)
        else:
            sender, receiver = (d.m3 if bc.method == 3 else d.m4)[bc.name]
            sc, rc = sender.counters.as_dict(), receiver.counters.as_dict()
            row["counters"] = {f"{bc.a}>{bc.b}": sc}
            row["receiver"] = rc
            blocks.extend([sc, rc])
            row["dos"] = rc["dos"]
            if bc.method == 4:
                row["blocks_sent"] = sender.blocks_sent
                row["block_size"] = bc.block_size
                row["unmatched_losses"] = receiver.losses
            else:
                row["mode"] = bc.mode
        borders.append(row)

    reqs = [r.as_dict() for r in runner.requests]
    committed = [r for r in runner.requests if r.state == "committed"]
    bytes_equal, no_copy = True, True
    for r in committed:
        src, dst = d.stores[r.source], d.stores[r.destination]
        a = next((e for e in src.entries() if e.key_id == r.rid), None)
        b = next((e for e in dst.entries() if e.key_id == r.rid), None)
        if a is None or b is None or a.key.data != b.key.data:
            bytes_equal = False
        for n, st in d.stores.items():
            if n not in (r.source, r.destination) and st.has_key(r.rid):
                no_copy = False
    e2e = {
        "requested": len(reqs),
        "committed": len(committed),
        "failed": sum(1 for r in runner.requests if r.state == "failed"),
        "pending": sum(1 for r in runner.requests if r.state == "pending"),
        "latency": _stats([r.finished - r.requested for r in committed]),
        "relay_latency": _stats([r.relay_latency for r in committed]),
        "labels": sorted({r.label for r in committed}),
        "requests": reqs,
    }

    relays = {}
    for n, agent in d.agents.items():
        events = {}
        for ev in agent.ledger:
            events[ev["event"]] = events.get(ev["event"], 0) + 1
        relays[str(n)] = {**agent.counters, **{f"ledger_{k}": v for k, v in sorted(events.items())}}

    dos = {f"link:{l['name']}": l["dos"] + l["replays"] for l in links}
    dos.update({f"border:{b['name']}": b["dos"] for b in borders})
    dos.update({f"relay:{n}": c["malformed"] + c["rejected_replay"] for n, c in relays.items()})

    nodes = {}
    for n, st in d.stores.items():
        rows = st.listing()
        nodes[str(n)] = {
            "keys": len(rows),
            "consumed": sum(1 for x in rows if x["consumed"]),
            "e2e": sum(1 for x in rows if x["supplier"].startswith("e2e:")),
        }

    checks["e2e_all_committed"] = all(r.state == "committed" for r in runner.requests)
    checks["e2e_bytes_equal"] = bytes_equal
    checks["no_intermediate_copy"] = no_copy
    checks["counters_reconcile"] = all(_reconciles(c) for c in blocks)
    checks["streams_identical"] = all(l["identical"] for l in links) and all(b["identical"] for b in borders)
    checks["drains_matched"] = all(x["matched"] and not x["error"] for x in runner.drains)
    audit = audit_relays(d.agents, d.stores, d.federation.handles)
    checks["relay_audit"] = audit.ok

    data = {
        "seed": cfg.seed,
        "duration": _r(script.duration),
        "settle": _r(script.settle),
        "end_time": _r(d.scheduler.now),
        "events_run": d.scheduler.events_run,
        "links": links,
        "borders": borders,
        "e2e": e2e,
        "drains": runner.drains,
        "actions": runner.events,
        "relays": relays,
        "relay_audit": audit.as_dict(),
        "dos": dos,
        "nodes": nodes,
        "labels": {
            **{f"link:{l['name']}": l["label"] for l in links},
            **{f"border:{b['name']}": b["label"] for b in borders},
        },
        "checks": checks,
        "ok": all(checks.values()),
        "trace_hash": d.net.trace_hash(),
        "trace_lines": len(d.net.trace),
    }
    return Report(data, d)


@dataclass
class Report:
    data: dict
    deployment: Deployment | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return bool(self.data["ok"])

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    def table(self) -> str:
        d = self.data
        out = [f"seed {d['seed']}  duration {d['duration']} s  settle {d['settle']} s  trace {d['trace_hash'][:16]}"]
        out.append("")
        out.append(f"{'link':<28} {'type':<4} {'cfg bps':>8} {'meas bps':>9} {'keys a/b':>11} {'same':>5} {'dos':>4}  label")
        for l in d["links"]:
            out.append(
                f"{l['name'][:28]:<28} {l['type']:<4} {l['rate_bps']:>8} {l['measured_bps']:>9.1f} "
                f"{l['keys_a']:>5}/{l['keys_b']:<5} {str(l['identical']):>5} {l['dos']:>4}  {l['label']}"
            )
        out.append("")
        out.append(f"{'border':<20} {'m':>1} {'direction':<34} {'sent':>6} {'dlvd':>6} {'lost':>5} {'pend':>5} {'dos':>4}  label")
        for b in d["borders"]:
            for direction, c in b["counters"].items():
                out.append(
                    f"{b['name'][:20]:<20} {b['method']:>1} {direction[:34]:<34} {c['sent']:>6} {c['delivered']:>6} "
                    f"{c['lost']:>5} {c['pending']:>5} {b['dos']:>4}  {b['label']}"
                )
        e = d["e2e"]
        out.append("")
        lat = e["latency"]
        out.append(
            f"e2e: {e['committed']}/{e['requested']} committed, {e['failed']} failed; "
            f"latency mean {lat['mean']} s, max {lat['max']} s"
        )
        for r in e["requests"]:
            if r["state"] != "committed":
                out.append(f"  {r['source']} -> {r['destination']}: {r['state']} ({r['last_error']})")
        if d["drains"]:
            out.append("")
            for x in d["drains"]:
                out.append(f"drain {x['node']} <- {x['supplier']}: {x['drained']} keys, matched={x['matched']} {x['error']}")
        out.append("")
        for k, v in d["checks"].items():
            out.append(f"check {k:<22} {'ok' if v else 'FAILED'}")
        out.append(f"overall: {'ok' if d['ok'] else 'FAILED'}")
        return "\n".join(out) + "\n"


def run_scenario(
    config: DeploymentConfig | str | dict,
    script: Script | str | dict | None = None,
    *,
    seed: int | None = None,
    wall_clock: bool = False,
) -> Report:
    """Build the deployment, run the script, return the report.

    Config problems raise `ConfigError` with the path of the offending field.
    """
    if not isinstance(config, DeploymentConfig):
        config = load_config(config)
    if not isinstance(script, Script):
        script = load_script(script)
    try:
        deployment = Deployment(config, seed=seed, wall_clock=wall_clock)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("", str(exc)) from exc
    return Runner(deployment, script).run()
