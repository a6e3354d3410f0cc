"""Trusted-node key relay and per-domain path computation.

Every node runs a `RelayAgent`.  An end-to-end key travels hop by hop: the
upstream node consumes one key of the link to the next hop as a one-time pad,
the downstream node consumes the same key by id, unwraps and re-wraps for the
following hop.  Plaintext exists at an intermediate node only between those
two steps.

The source coordinates the end-to-end handshake with the destination
(`twophase`), with control frames also routed hop by hop along the path, so
the key ends up in both stores or in neither.  Pads consumed by a relay that
later aborts are burned, never returned to the pool.

A `Controller` owns one domain (or several merged domains) and computes
paths only inside it.  `Federation` stitches segments across border pairs
from an allowlist; controllers never talk to each other.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from . import crypto
from .core import (
    DEFAULT_KEY_LEN,
    KeyEntry,
    KeyId,
    KeyMaterial,
    LinkDescriptor,
    LinkId,
    NodeId,
    PathSpec,
    Reader,
    Validity,
    Writer,
    new_key_id,
    read_expr,
    read_node,
    read_validity,
    write_expr,
    write_node,
    write_validity,
)
from .kms.store import KeyStore, KmsError, NoKeyAvailable
from .netsim import ChannelDown, Scheduler
from .seclevel import SecurityExpr, serial
from .twophase import ABORT, Coordinator, Participant

log = logging.getLogger(__name__)

HOP = 0x01
CTL = 0x02
TOWARD_DEST = 0
TOWARD_SOURCE = 1
NACK = 0x10  # relay-level: a hop could not continue; the source aborts at once

PER_HOP_TIMEOUT = 10.0
DEFAULT_VALIDITY_S = 3600


class UnreachableError(Exception):
    """No usable path; `segment` names the part that failed."""

    def __init__(self, segment: str, message: str = "") -> None:
        super().__init__(f"{segment}: {message}" if message else segment)
        self.segment = segment


def e2e_supplier(a: NodeId, b: NodeId) -> str:
    lo, hi = sorted((a, b))
    return f"e2e:{lo}~{hi}"


@dataclass(frozen=True)
class TopologyLink:
    """A link as the relay sees it: descriptor plus the store supplier holding its keys."""

    desc: LinkDescriptor
    supplier_id: str

    @property
    def link_id(self) -> LinkId:
        return self.desc.link_id


# --------------------------------------------------------------------------
# path computation


class Controller:
    """Path computation inside one administrative domain (or a merged set).

    `stores` is the controller's read-only view of its nodes' key inventory;
    a link is usable in direction u -> v only if u holds a key of the
    requested length in its own half of the link's stream.
    """

    def __init__(
        self,
        name: str,
        domains: Iterable[str],
        links: Iterable[TopologyLink],
        stores: dict[NodeId, KeyStore],
        border_nodes: Iterable[NodeId] = (),
    ) -> None:
        self.name = name
        self.domains = frozenset(domains)
        self.border_nodes = frozenset(border_nodes)
        self.stores = {n: s for n, s in stores.items() if n.domain in self.domains}
        self.links: dict[LinkId, TopologyLink] = {}
        for tl in links:
            a, b = tl.desc.endpoints()
            if a.domain not in self.domains or b.domain not in self.domains:
                raise ValueError(f"controller {name}: link {tl.link_id} leaves its domains")
            self.links[tl.link_id] = tl
        for n in self.border_nodes:
            if n.domain not in self.domains:
                raise ValueError(f"controller {name}: border node {n} is foreign")

    def owns_node(self, node: NodeId) -> bool:
        return node.domain in self.domains

    def _usable(self, u: NodeId, tl: TopologyLink, length: int) -> bool:
        store = self.stores.get(u)
        v = tl.desc.other(u)
        return store is not None and store.available(v, tl.supplier_id, length, owned=True) > 0

    def compute_path(self, source: NodeId, target: NodeId, length: int = DEFAULT_KEY_LEN) -> PathSpec:
        """Fewest hops over links with key material; ties go to the smaller link-id sequence."""
        for n in (source, target):
            if not self.owns_node(n):
                raise UnreachableError(f"{self.name}: {source}->{target}", f"{n} is not in this domain")
        if source == target:
            raise UnreachableError(f"{self.name}: {source}->{target}", "source equals target")
        edges: dict[NodeId, list[tuple[LinkId, NodeId]]] = {}
        for tl in self.links.values():
            for u in tl.desc.endpoints():
                if self._usable(u, tl, length):
                    edges.setdefault(u, []).append((tl.link_id, tl.desc.other(u)))
        # distances to target over usable directed edges
        rev: dict[NodeId, list[NodeId]] = {}
        for u, outs in edges.items():
            for _, v in outs:
                rev.setdefault(v, []).append(u)
        dist = {target: 0}
        q = deque([target])
        while q:
            v = q.popleft()
            for u in rev.get(v, ()):
                if u not in dist:
                    dist[u] = dist[v] + 1
                    q.append(u)
        if source not in dist:
            raise UnreachableError(f"{self.name}: {source}->{target}", "no path with key material")
        hops, links = [source], []
        u = source
        while u != target:
            lid, v = min(
                ((lid, v) for lid, v in edges[u] if dist.get(v) == dist[u] - 1),
                key=lambda e: e[0].bytes,
            )
            hops.append(v)
            links.append(lid)
            u = v
        return PathSpec(tuple(hops), tuple(links))


@dataclass(frozen=True)
class BorderPair:
    """An allowlisted key stream between border nodes of two controllers."""

    link: TopologyLink
    method: int

    @property
    def nodes(self) -> tuple[NodeId, NodeId]:
        return self.link.desc.endpoints()


class Federation:
    """Stitches per-controller segments into one relay path and launches it."""

    def __init__(
        self,
        controllers: Sequence[Controller],
        border_pairs: Sequence[BorderPair],
        agents: dict[NodeId, "RelayAgent"],
        rng,
    ) -> None:
        self.controllers = {c.name: c for c in controllers}
        self.border_pairs = list(border_pairs)
        self.agents = agents
        self.rng = rng
        self.handles: list[RelayHandle] = []
        for bp in self.border_pairs:
            a, b = bp.nodes
            if self.controller_of(a) is self.controller_of(b):
                raise ValueError(f"border pair {bp.link.link_id} does not cross controllers")

    def controller_of(self, node: NodeId) -> Controller:
        for c in self.controllers.values():
            if c.owns_node(node):
                return c
        raise UnreachableError(str(node), "node belongs to no controller")

    def all_links(self) -> dict[LinkId, TopologyLink]:
        out = {lid: tl for c in self.controllers.values() for lid, tl in c.links.items()}
        out.update({bp.link.link_id: bp.link for bp in self.border_pairs})
        return out

    def _controller_route(self, src: Controller, dst: Controller) -> list[str]:
        adj: dict[str, set[str]] = {}
        for bp in self.border_pairs:
            a, b = (self.controller_of(n).name for n in bp.nodes)
            adj.setdefault(a, set()).add(b)
            adj.setdefault(b, set()).add(a)
        prev = {src.name: None}
        q = deque([src.name])
        while q:
            c = q.popleft()
            for n in sorted(adj.get(c, ())):
                if n not in prev:
                    prev[n] = c
                    q.append(n)
        if dst.name not in prev:
            raise UnreachableError(f"{src.name}->{dst.name}", "no border agreement chain")
        route = [dst.name]
        while route[-1] != src.name:
            route.append(prev[route[-1]])
        return route[::-1]

    def _pick_border(self, a: str, b: str, length: int) -> tuple[BorderPair, NodeId, NodeId]:
        options = []
        for bp in self.border_pairs:
            x, y = bp.nodes
            if self.controller_of(x).name == b:
                x, y = y, x
            if self.controller_of(x).name != a or self.controller_of(y).name != b:
                continue
            store = self.agents[x].store
            if store.available(y, bp.link.supplier_id, length, owned=True) > 0:
                options.append((bp.link.link_id.bytes, bp, x, y))
        if not options:
            raise UnreachableError(f"border {a}->{b}", "no border pair with key material")
        _, bp, x, y = min(options, key=lambda o: o[0])
        return bp, x, y

    def compute_path(self, source: NodeId, destination: NodeId, length: int = DEFAULT_KEY_LEN) -> PathSpec:
        src_c, dst_c = self.controller_of(source), self.controller_of(destination)
        if src_c is dst_c:
            return src_c.compute_path(source, destination, length)
        route = self._controller_route(src_c, dst_c)
        hops: list[NodeId] = [source]
        links: list[LinkId] = []
        crossings: set[int] = set()
        here = source
        for a, b in zip(route, route[1:]):
            bp, exit_node, entry_node = self._pick_border(a, b, length)
            if here != exit_node:
                seg = self.controllers[a].compute_path(here, exit_node, length)
                hops.extend(seg.hops[1:])
                links.extend(seg.links)
            crossings.add(len(hops) - 1)
            hops.append(entry_node)
            links.append(bp.link.link_id)
            here = entry_node
        if here != destination:
            seg = self.controllers[route[-1]].compute_path(here, destination, length)
            hops.extend(seg.hops[1:])
            links.extend(seg.links)
        return PathSpec(tuple(hops), tuple(links), frozenset(crossings))

    def request_e2e_key(
        self,
        app: str,
        source: NodeId,
        destination: NodeId,
        length: int = DEFAULT_KEY_LEN,
        on_done: Callable[["RelayHandle"], None] | None = None,
    ) -> tuple[KeyId, "RelayHandle"]:
        """Start an end-to-end delivery; path errors raise `UnreachableError`."""
        path = self.compute_path(source, destination, length)
        rid = new_key_id(self.rng)
        payload = KeyMaterial(self.rng.bytes(length))
        handle = self.agents[source].start_relay(rid, path, payload, app=app, on_done=on_done)
        self.handles.append(handle)
        return rid, handle


# --------------------------------------------------------------------------
# relay


@dataclass
class RelayHandle:
    rid: KeyId
    path: PathSpec
    app: str
    started: float
    state: str = "pending"
    reason: str = ""
    finished: float | None = None
    label: SecurityExpr | None = None
    on_done: Callable[["RelayHandle"], None] | None = None

    @property
    def latency(self) -> float | None:
        return None if self.finished is None else self.finished - self.started

    def _finish(self, state: str, now: float, reason: str = "") -> None:
        self.state = state
        self.reason = reason
        self.finished = now
        if self.on_done is not None:
            self.on_done(self)


def _write_hops(w: Writer, hops: Sequence[NodeId]) -> None:
    w.u32(len(hops))
    for h in hops:
        write_node(w, h)


def _read_hops(r: Reader) -> tuple[NodeId, ...]:
    return tuple(read_node(r) for _ in range(r.count()))


class _PathPort:
    """Adapter giving `twophase` a port that routes along a relay path."""

    def __init__(self, agent: "RelayAgent", rid: KeyId, path: PathSpec, index: int, direction: int) -> None:
        self.agent = agent
        self.rid = rid
        self.path = path
        self.index = index
        self.direction = direction

    @property
    def alive(self) -> bool:
        nxt = self.path.hops[self.index + (1 if self.direction == TOWARD_DEST else -1)]
        return self.agent.ports[nxt].alive

    def send(self, frame: bytes) -> None:
        self.agent._send_ctl(self.rid, self.path, self.index, self.direction, frame)


@dataclass
class _RelayState:
    path: PathSpec
    pad_in: tuple[str, KeyId] | None = None
    pad_out: tuple[str, KeyId] | None = None


class RelayAgent:
    """Relay duties of one trusted node."""

    def __init__(
        self,
        node: NodeId,
        store: KeyStore,
        scheduler: Scheduler,
        links: dict[LinkId, TopologyLink],
        *,
        per_hop_timeout: float = PER_HOP_TIMEOUT,
        validity_s: int = DEFAULT_VALIDITY_S,
    ) -> None:
        self.node = node
        self.store = store
        self.scheduler = scheduler
        self.links = links
        self.per_hop_timeout = per_hop_timeout
        self.validity_s = validity_s
        self.ports: dict[NodeId, object] = {}
        self.participant = Participant(ordered=False, name=f"relay@{node}")
        self._coordinators: dict[KeyId, tuple[Coordinator, RelayHandle]] = {}
        self._state: dict[KeyId, _RelayState] = {}
        self._aborted: set[KeyId] = set()
        self.ledger: list[dict] = []
        self.counters = {"rejected_replay": 0, "pad_timeout": 0, "malformed": 0, "no_pad": 0}

    def connect(self, neighbor: NodeId, port) -> None:
        self.ports[neighbor] = port
        port.listen(lambda msg, n=neighbor: self._on_message(n, msg))

    def _log(self, event: str, rid: KeyId, link: LinkId | None = None, pad: KeyId | None = None) -> None:
        self.ledger.append({
            "t": self.scheduler.now, "node": str(self.node), "event": event, "rid": rid,
            "link": link, "pad": pad,
        })

    # ------------------------------------------------------------ sending

    def _hop_message(self, rid, path, index, pad_id, ct, validity, label) -> bytes:
        w = Writer()
        w.u8(HOP)
        w.uid(rid)
        _write_hops(w, path.hops)
        w.u32(len(path.links))
        for lid in path.links:
            w.uid(lid)
        w.u32(len(path.border_crossings))
        for i in sorted(path.border_crossings):
            w.u32(i)
        w.u32(index)
        w.uid(pad_id)
        w.octets(ct)
        write_validity(w, validity)
        write_expr(w, label)
        return w.getvalue()

    def _forward(self, rid, path, index, payload: KeyMaterial, validity, label) -> bool:
        """Wrap `payload` for hop index -> index+1 and send it.

        `label` is the serial composition of the hops so far (None at the source).
        """
        tl = self.links[path.links[index]]
        nxt = path.hops[index + 1]
        try:
            pad = self.store.take_oldest(nxt, tl.supplier_id, payload.length, f"relay:{rid}:out")
        except NoKeyAvailable:
            self.counters["no_pad"] += 1
            return False
        st = self._state.setdefault(rid, _RelayState(path))
        st.pad_out = (tl.supplier_id, pad.key_id)
        self._log("wrap", rid, tl.link_id, pad.key_id)
        ct = crypto.otp_wrap(payload, pad.key)
        label = pad.label if label is None else serial(label, pad.label)
        msg = self._hop_message(rid, path, index + 1, pad.key_id, ct, validity, label)
        try:
            self.ports[nxt].send(msg)
        except ChannelDown:
            self._log("lost", rid, tl.link_id, pad.key_id)
            return False
        return True

    def start_relay(
        self,
        rid: KeyId,
        path: PathSpec,
        payload: KeyMaterial,
        *,
        app: str = "",
        on_done: Callable[[RelayHandle], None] | None = None,
    ) -> RelayHandle:
        if path.hops[0] != self.node:
            raise ValueError("relay must start at its source node")
        now = self.scheduler.now
        handle = RelayHandle(rid, path, app, now, on_done=on_done)
        start = int(self.store.clock())
        validity = Validity(start, start + self.validity_s)
        dest = path.hops[-1]
        supplier = e2e_supplier(self.node, dest)
        coord = Coordinator(
            self.scheduler,
            [_PathPort(self, rid, path, 0, TOWARD_DEST)],
            timeout=self.per_hop_timeout * len(path.links),
            name=f"relay@{self.node}",
        )
        self._coordinators[rid] = (coord, handle)

        def committed(info: bytes) -> None:
            label = read_expr(Reader(info))
            handle.label = label
            self._ensure_supplier(supplier, dest)
            self.store.push_key(supplier, KeyEntry(rid, payload, dest, supplier, validity, label))
            self._log("commit", rid)
            handle._finish("committed", self.scheduler.now)

        def aborted(reason: str) -> None:
            self._abort_local(rid)
            handle._finish("aborted", self.scheduler.now, reason)

        # arm the timeout before the first hop so an immediate failure aborts cleanly
        coord.begin(rid, [], committed, aborted)
        if not self._forward(rid, path, 0, payload, validity, None):
            coord.abort(rid, "first hop unavailable")
        return handle

    def _ensure_supplier(self, supplier: str, peer: NodeId) -> None:
        if all(s.supplier_id != supplier for s in self.store.suppliers(peer)):
            self.store.register_supplier(supplier, peer)

    # ------------------------------------------------------------ receiving

    def _on_message(self, neighbor: NodeId, msg: bytes) -> None:
        try:
            r = Reader(msg)
            kind = r.u8()
            if kind == HOP:
                self._on_hop(neighbor, r)
            elif kind == CTL:
                self._on_ctl(neighbor, r)
            else:
                self.counters["malformed"] += 1
        except (ValueError, KeyError, IndexError) as exc:
            self.counters["malformed"] += 1
            log.info("%s: malformed relay message from %s (%s)", self.node, neighbor, exc)

    def _on_hop(self, neighbor: NodeId, r: Reader) -> None:
        rid = r.uid()
        hops = _read_hops(r)
        links = tuple(r.uid() for _ in range(r.count()))
        crossings = frozenset(r.u32() for _ in range(r.count()))
        index = r.u32()
        pad_id = r.uid()
        ct = r.octets()
        validity = read_validity(r)
        label = read_expr(r)
        r.done()
        path = PathSpec(hops, links, crossings)
        if hops[index] != self.node or hops[index - 1] != neighbor:
            self.counters["malformed"] += 1
            return
        tl = self.links[links[index - 1]]

        def proceed() -> None:
            if timer is not None:
                timer.cancel()
            self._unwrap_and_continue(rid, path, index, tl, neighbor, pad_id, ct, validity, label)

        def give_up() -> None:
            self.store.cancel_wait(tl.supplier_id, pad_id, proceed)
            self.counters["pad_timeout"] += 1
            log.info("%s: pad %s for relay %s never arrived", self.node, pad_id, rid)
            self._nack(rid, path, index)

        timer = None
        if self.store.has_key(pad_id, tl.supplier_id):
            self._unwrap_and_continue(rid, path, index, tl, neighbor, pad_id, ct, validity, label)
            return
        # the upstream copy can be committed slightly before ours
        timer = self.scheduler.after(self.per_hop_timeout, give_up)
        self.store.when_available(tl.supplier_id, pad_id, proceed)

    def _unwrap_and_continue(self, rid, path, index, tl, neighbor, pad_id, ct, validity, label) -> None:
        if rid in self._aborted:
            self.store.burn(tl.supplier_id, pad_id, f"relay:{rid}:burned")
            self._log("burn", rid, tl.link_id, pad_id)
            return
        try:
            pad = self.store.take_by_id(neighbor, tl.supplier_id, pad_id, f"relay:{rid}:in")
        except KmsError as exc:
            self.counters["rejected_replay"] += 1
            log.info("%s: relay %s rejected (%s)", self.node, rid, exc)
            return
        st = self._state.setdefault(rid, _RelayState(path))
        st.pad_in = (tl.supplier_id, pad_id)
        self._log("unwrap", rid, tl.link_id, pad_id)
        payload = crypto.otp_unwrap(ct, pad.key)
        if index == len(path.hops) - 1:
            self._arrive(rid, path, payload, validity, label)
            return
        ok = self._forward(rid, path, index, payload, validity, label)
        # the plaintext is dropped here; nothing about it is stored at this node
        del payload
        if not ok:
            self._nack(rid, path, index)

    def _nack(self, rid: KeyId, path: PathSpec, index: int) -> None:
        try:
            self._send_ctl(rid, path, index, TOWARD_SOURCE, bytes([NACK]))
        except ChannelDown:
            pass  # the source's timeout covers this

    def _arrive(self, rid, path, payload, validity, label) -> None:
        source = path.hops[0]
        supplier = e2e_supplier(source, self.node)
        if self.participant.seen(rid) or self.store.has_key(rid):
            self.counters["rejected_replay"] += 1
            return
        entry = KeyEntry(rid, payload, source, supplier, validity, label)
        back = [_PathPort(self, rid, path, len(path.hops) - 1, TOWARD_SOURCE)]

        def apply() -> None:
            self._ensure_supplier(supplier, source)
            self.store.push_key(supplier, entry)
            self._log("store", rid)

        w = Writer()
        write_expr(w, label)
        self.participant.prepare(rid, back, apply, info=w.getvalue(), discard=lambda: self._abort_local(rid))

    # ------------------------------------------------------------ control frames

    def _send_ctl(self, rid, path, index, direction, frame) -> None:
        nxt_index = index + 1 if direction == TOWARD_DEST else index - 1
        nxt = path.hops[nxt_index]
        st = self._state.get(rid)
        pad = None
        if st is not None:
            pad = st.pad_out if direction == TOWARD_DEST else st.pad_in
        w = Writer()
        w.u8(CTL)
        w.uid(rid)
        w.u8(direction)
        _write_hops(w, path.hops)
        w.u32(len(path.links))
        for lid in path.links:
            w.uid(lid)
        w.u32(nxt_index)
        w.u8(0 if pad is None else 1)
        if pad is not None:
            w.uid(pad[1])
        w.octets(frame)
        self.ports[nxt].send(w.getvalue())

    def _on_ctl(self, neighbor: NodeId, r: Reader) -> None:
        rid = r.uid()
        direction = r.u8()
        hops = _read_hops(r)
        links = tuple(r.uid() for _ in range(r.count()))
        index = r.u32()
        pad_id = r.uid() if r.u8() else None
        frame = r.octets()
        r.done()
        if hops[index] != self.node:
            self.counters["malformed"] += 1
            return
        path = PathSpec(hops, links)
        if frame and frame[0] == ABORT:
            self._aborted.add(rid)
            if pad_id is not None:
                # the pad the upstream node spent on us; it must never be served
                lid = links[index - 1] if direction == TOWARD_DEST else links[index]
                if self.store.burn(self.links[lid].supplier_id, pad_id, f"relay:{rid}:burned"):
                    self._log("burn", rid, lid, pad_id)
        terminal = len(hops) - 1 if direction == TOWARD_DEST else 0
        if index == terminal:
            if direction == TOWARD_DEST:
                self.participant.handle(frame, [_PathPort(self, rid, path, index, TOWARD_SOURCE)])
            else:
                entry = self._coordinators.get(rid)
                if entry is None:
                    return
                if frame[:1] == bytes([NACK]):
                    entry[0].abort(rid, "a downstream hop could not continue")
                else:
                    entry[0].handle(frame)
            return
        try:
            self._send_ctl(rid, path, index, direction, frame)
        except ChannelDown:
            pass  # the coordinator retransmits its decision

    def _abort_local(self, rid: KeyId) -> None:
        self._aborted.add(rid)
        self._log("abort", rid)
